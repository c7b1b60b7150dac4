"""Adam training loop over randomly cropped (optionally augmented) utterances."""

from __future__ import annotations

import csv
import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .amsoftmax import AmSoftmax
from .audio_io import TRAIN_CROP, Waveform, read_wav, sample_train_crop
from .augment import augment
from .dsp import batch_log_mel
from .errors import ConfigurationError, NumericError
from .shrinkage import ModelConfig, SpeakerNet
from .tensor import load_tensors, save_tensors

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "lr", "loss", "acc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    initial_lr: float = 0.001
    lr_decay: float = 0.9
    decay_every: int = 2
    epochs: int = 200
    crop_len: int = TRAIN_CROP
    seed: int = 0
    augment: bool = False
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * config.lr_decay ** (epoch // config.decay_every)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the arrays in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainResult:
    history: list  # rows matching METRICS_HEADER
    checkpoints: list


def _clip(grads, limit):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > limit:
        for g in grads.values():
            g *= limit / total


def train(config: TrainConfig, model: SpeakerNet, loss: AmSoftmax, dataset, corpus_index=None,
          out_dir=None, loader=None) -> TrainResult:
    """Train ``model`` and ``loss`` jointly.

    ``dataset`` is a sequence of (Waveform or WAV path, speaker index). One
    epoch visits every utterance once in a seeded shuffled order, drawing a
    single random crop from each. Batches smaller than 2 at the end of an epoch
    are dropped (batch norm needs two values per channel).
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    labels = np.array([label for _, label in dataset])
    if len(np.unique(labels)) < 2:
        raise ConfigurationError("dataset needs at least 2 speakers")
    if config.augment and corpus_index is None:
        raise ConfigurationError("augmentation enabled but no corpus index given")
    loader = loader or functools.lru_cache(maxsize=None)(read_wav)

    def fetch(item):
        return item if isinstance(item, Waveform) else loader(item)

    rng = np.random.default_rng(config.seed)
    params = {f"model.{k}": v for k, v in model.named_parameters()}
    params.update({f"loss.{k}": v for k, v in loss.named_parameters()})
    state = AdamState()
    history, checkpoints = [], []
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    model.train()
    try:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            order = rng.permutation(len(dataset))
            total_loss, total_correct, seen = 0.0, 0, 0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                if len(batch) < 2:
                    continue
                crops = []
                for i in batch:
                    crop = sample_train_crop(fetch(dataset[i][0]), rng, config.crop_len)
                    if config.augment:
                        crop = augment(crop, corpus_index, rng, loader=loader)
                    crops.append(crop.samples)
                feats = batch_log_mel(np.stack(crops), model.config.trunk.n_mels)
                model.zero_grad()
                loss.zero_grad()
                value, correct = loss(model(feats), labels[batch])
                value.backward()
                grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                         for k, p in params.items()}
                if config.grad_clip:
                    _clip(grads, config.grad_clip)
                adam_step({k: p.data for k, p in params.items()}, grads, state, lr)
                total_loss += float(value.data) * len(batch)
                total_correct += correct
                seen += len(batch)
            row = (epoch, state.step, lr, total_loss / max(seen, 1), total_correct / max(seen, 1))
            history.append(row)
            log.info("epoch %d step %d lr %.6g loss %.4f acc %.3f", *row)
            if writer is not None:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
                metrics_fh.flush()
                ckpt = out_dir / f"epoch_{epoch:03d}.ckpt"
                save_checkpoint(ckpt, model, loss)
                checkpoints.append(ckpt)
    finally:
        if writer is not None:
            metrics_fh.close()
    model.eval()
    return TrainResult(history, checkpoints)


def save_checkpoint(path, model: SpeakerNet, loss: AmSoftmax | None = None) -> None:
    """Tensor container at ``path`` plus a one-line ``path.manifest`` describing the model."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if loss is not None:
        tensors.update({f"loss.{k}": v for k, v in loss.state_dict().items()})
    save_tensors(path, tensors)
    Path(f"{path}.manifest").write_text(model.config.to_manifest() + "\n", encoding="utf-8")


def load_checkpoint(path) -> SpeakerNet:
    """Rebuild a model from ``path`` and its manifest, in eval mode."""
    manifest = Path(f"{path}.manifest")
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    config = ModelConfig.from_manifest(manifest.read_text(encoding="utf-8").strip())
    model = SpeakerNet(config, np.random.default_rng(0))
    tensors = load_tensors(path)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model.eval()
