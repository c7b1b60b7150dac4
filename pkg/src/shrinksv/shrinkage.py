"""Residual shrinkage ResNet-34 trunk with channel-wise soft thresholds, plus SAP/ASP pooling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (BatchNorm, Conv2d, Linear, Module, Tensor, _unbroadcast, abs_op, add,
                     conv_output_size, global_avg_pool, mean, mul, parameter, relu,
                     reshape, sigmoid, transpose)
from .errors import ShapeError

STD_FLOOR = 1e-9


def soft_threshold(x: Tensor, tau: Tensor) -> Tensor:
    """Shrink toward zero by ``tau``: x - tau above, 0 inside [-tau, tau], x + tau below.

    ``tau`` is broadcast over the trailing axes of ``x`` it lacks, so an N x C
    threshold applies per channel to an N x C x H x W map.
    """
    if np.any(tau.data < 0):
        raise ValueError("soft_threshold: thresholds must be non-negative")
    t = tau.data.reshape(tau.shape + (1,) * (x.ndim - tau.ndim))
    above = x.data > t
    below = x.data < -t
    out = np.where(above, x.data - t, np.where(below, x.data + t, 0)).astype(x.data.dtype)

    def backward(g):
        live = above | below
        gt = -(g * np.sign(x.data) * live)
        return g * live, _unbroadcast(gt, t.shape).reshape(tau.shape)

    return Tensor.from_op(out, (x, tau), backward)


def channel_thresholds(feature: Tensor, fc1: Linear, bn: BatchNorm, fc2: Linear) -> Tensor:
    """Per-channel thresholds: scale in (0, 1) from a small sub-network times the channel abs-mean."""
    c = feature.shape[1]
    if fc1.weight.shape[1] != c or fc2.weight.shape[0] != c:
        raise ShapeError(f"threshold sub-network {fc1.weight.shape}/{fc2.weight.shape} does not fit {c} channels")
    absmean = global_avg_pool(abs_op(feature))
    scale = sigmoid(fc2(relu(bn(fc1(absmean)))))
    return mul(scale, absmean)


class RsbuCw(Module):
    """Post-activation residual block whose residual branch is soft-thresholded per channel."""

    def __init__(self, in_ch, out_ch, stride, rng):
        self.conv1 = Conv2d(in_ch, out_ch, rng, 3, stride, 1)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, rng, 3, 1, 1)
        self.bn2 = BatchNorm(out_ch)
        self.fc1 = Linear(out_ch, out_ch, rng)
        self.bn_fc = BatchNorm(out_ch)
        self.fc2 = Linear(out_ch, out_ch, rng)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv2d(in_ch, out_ch, rng, 1, stride, 0)
            self.down_bn = BatchNorm(out_ch)
        else:
            self.down_conv = self.down_bn = None
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride

    def shortcut(self, x):
        if self.down_conv is None:
            return x
        return self.down_bn(self.down_conv(x))

    def __call__(self, x):
        return rsbu_forward(self, x)


def rsbu_forward(block: RsbuCw, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != block.in_ch:
        raise ShapeError(f"block expects N x {block.in_ch} x H x W, got {x.shape}")
    r = relu(block.bn1(block.conv1(x)))
    r = block.bn2(block.conv2(r))
    tau = channel_thresholds(r, block.fc1, block.bn_fc, block.fc2)
    r = soft_threshold(r, tau)
    return relu(add(r, block.shortcut(x)))


@dataclass(frozen=True)
class TrunkConfig:
    variant: str = "H"
    stage_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: tuple = (3, 4, 6, 3)
    stage_strides: tuple = (1, 2, 2, 2)
    first_conv_stride: int = 1
    n_mels: int = 64
    # "flatten": channels x mel per frame; "mean": average over mel, channels per frame
    freq_reduce: str = "flatten"

    @classmethod
    def preset(cls, variant: str) -> "TrunkConfig":
        if variant == "H":
            return cls("H", (32, 64, 128, 256))
        if variant == "Q":
            return cls("Q", (16, 32, 64, 128), freq_reduce="mean")
        raise ValueError(f"variant must be 'Q' or 'H', got {variant!r}")

    def stage_shapes(self, length: int):
        """(time, mel, channels) after conv1 and after each stage."""
        t = conv_output_size(length, 3, self.first_conv_stride, 1)
        f = conv_output_size(self.n_mels, 3, self.first_conv_stride, 1)
        shapes = [(t, f, self.stage_channels[0])]
        for ch, stride in zip(self.stage_channels, self.stage_strides):
            t, f = conv_output_size(t, 3, stride, 1), conv_output_size(f, 3, stride, 1)
            shapes.append((t, f, ch))
        return shapes

    @property
    def frame_dim(self) -> int:
        _, f, c = self.stage_shapes(64)[-1]
        return c * f if self.freq_reduce == "flatten" else c


class Trunk(Module):
    def __init__(self, config: TrunkConfig, rng):
        self.config = config
        ch = config.stage_channels
        self.conv1 = Conv2d(1, ch[0], rng, 3, config.first_conv_stride, 1)
        self.bn1 = BatchNorm(ch[0])
        self.blocks = []
        in_ch = ch[0]
        for out_ch, count, stride in zip(ch, config.blocks_per_stage, config.stage_strides):
            for i in range(count):
                self.blocks.append(RsbuCw(in_ch, out_ch, stride if i == 0 else 1, rng))
                in_ch = out_ch
        self.stage_ends = list(np.cumsum(config.blocks_per_stage) - 1)

    def __call__(self, features: Tensor, trace: list | None = None) -> Tensor:
        return trunk_forward(self, features, trace)


def trunk_forward(trunk: Trunk, features: Tensor, trace: list | None = None) -> Tensor:
    """N x 1 x L x n_mels features to an N x T x D frame matrix.

    If ``trace`` is a list, (time, mel, channels) is appended after conv1 and
    after each stage.
    """
    cfg = trunk.config
    if features.ndim != 4 or features.shape[1] != 1 or features.shape[3] != cfg.n_mels:
        raise ShapeError(f"trunk expects N x 1 x L x {cfg.n_mels}, got {features.shape}")
    if features.shape[2] < 8:
        raise ValueError(f"trunk needs at least 8 frames, got {features.shape[2]}")
    x = relu(trunk.bn1(trunk.conv1(features)))
    if trace is not None:
        trace.append((x.shape[2], x.shape[3], x.shape[1]))
    for i, block in enumerate(trunk.blocks):
        x = block(x)
        if trace is not None and i in trunk.stage_ends:
            trace.append((x.shape[2], x.shape[3], x.shape[1]))
    n, c, t, f = x.shape
    if cfg.freq_reduce == "mean":
        return transpose(mean(x, axis=3), (0, 2, 1))
    return reshape(transpose(x, (0, 2, 1, 3)), (n, t, c * f))


class PoolingHead(Module):
    """Attention over frames: logit_t = v . tanh(W h_t + b)."""

    def __init__(self, mode, frame_dim, rng, attention_dim=128):
        if mode not in ("SAP", "ASP"):
            raise ValueError(f"pooling mode must be 'SAP' or 'ASP', got {mode!r}")
        self.mode = mode
        bound = 1.0 / np.sqrt(frame_dim)
        self.att_weight = parameter(rng.uniform(-bound, bound, (attention_dim, frame_dim)))
        self.att_bias = parameter(np.zeros(attention_dim))
        self.context = parameter(rng.standard_normal(attention_dim) / np.sqrt(attention_dim))

    @property
    def out_dim(self) -> int:
        d = self.att_weight.shape[1]
        return d if self.mode == "SAP" else 2 * d

    def __call__(self, frames: Tensor) -> Tensor:
        return sap_pool(frames, self) if self.mode == "SAP" else asp_pool(frames, self)


def _attend(x, head):
    hidden = np.tanh(x @ head.att_weight.data.T + head.att_bias.data)
    logits = hidden @ head.context.data
    logits = logits - logits.max(axis=1, keepdims=True)
    alpha = np.exp(logits)
    alpha /= alpha.sum(axis=1, keepdims=True)
    return hidden, alpha


def attention_weights(frames, head: PoolingHead) -> np.ndarray:
    """Softmax attention over frames, N x T."""
    x = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    return _attend(x, head)[1]


def _attention_backward(x, hidden, alpha, g_alpha, g_x_direct, head):
    g_logit = alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True))
    g_context = np.einsum("nt,nta->a", g_logit, hidden)
    g_pre = g_logit[:, :, None] * head.context.data * (1 - hidden ** 2)
    g_w = np.einsum("nta,ntd->ad", g_pre, x)
    g_b = g_pre.sum(axis=(0, 1))
    g_x = g_x_direct + g_pre @ head.att_weight.data
    return g_x, g_w, g_b, g_context


def _check_frames(frames, head):
    if frames.ndim != 3 or frames.shape[2] != head.att_weight.shape[1]:
        raise ShapeError(f"pooling expects N x T x {head.att_weight.shape[1]}, got {frames.shape}")
    if frames.shape[1] < 1:
        raise ValueError("pooling needs at least one frame")


def sap_pool(frames: Tensor, head: PoolingHead) -> Tensor:
    """Attention-weighted mean of N x T x D frames -> N x D."""
    _check_frames(frames, head)
    x = frames.data
    hidden, alpha = _attend(x, head)
    out = np.einsum("nt,ntd->nd", alpha, x)

    def backward(g):
        g_alpha = np.einsum("ntd,nd->nt", x, g)
        g_direct = alpha[:, :, None] * g[:, None, :]
        return _attention_backward(x, hidden, alpha, g_alpha, g_direct, head)

    return Tensor.from_op(out, (frames, head.att_weight, head.att_bias, head.context), backward)


def asp_pool(frames: Tensor, head: PoolingHead) -> Tensor:
    """Attention-weighted mean and standard deviation, concatenated -> N x 2D."""
    _check_frames(frames, head)
    x = frames.data
    hidden, alpha = _attend(x, head)
    mu = np.einsum("nt,ntd->nd", alpha, x)
    var = np.einsum("nt,ntd->nd", alpha, x * x) - mu * mu
    live = var > STD_FLOOR
    sigma = np.sqrt(np.maximum(var, STD_FLOOR))
    out = np.concatenate([mu, sigma], axis=1)

    def backward(g):
        d = mu.shape[1]
        g_mu, g_sigma = g[:, :d], g[:, d:]
        g_var = np.where(live, g_sigma / (2 * sigma), 0.0)
        g_mu_total = g_mu - 2 * mu * g_var
        g_alpha = np.einsum("ntd,nd->nt", x, g_mu_total) + np.einsum("ntd,nd->nt", x * x, g_var)
        g_direct = alpha[:, :, None] * (g_mu_total[:, None, :] + 2 * x * g_var[:, None, :])
        return _attention_backward(x, hidden, alpha, g_alpha, g_direct, head)

    return Tensor.from_op(out, (frames, head.att_weight, head.att_bias, head.context), backward)


@dataclass(frozen=True)
class ModelConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    pooling: str = "SAP"
    attention_dim: int = 128
    embed_dim: int = 512

    @classmethod
    def preset(cls, variant="H", pooling="SAP", **overrides) -> "ModelConfig":
        trunk = TrunkConfig.preset(variant)
        trunk_keys = {k: overrides.pop(k) for k in list(overrides) if k in TrunkConfig.__dataclass_fields__}
        return cls(replace(trunk, **trunk_keys), pooling, **overrides)

    def to_manifest(self) -> str:
        t = self.trunk
        fields = {
            "variant": t.variant, "pooling": self.pooling, "n_mels": t.n_mels, "embed_dim": self.embed_dim,
            "channels": ",".join(map(str, t.stage_channels)),
            "blocks": ",".join(map(str, t.blocks_per_stage)),
            "strides": ",".join(map(str, t.stage_strides)),
            "first_conv_stride": t.first_conv_stride, "freq_reduce": t.freq_reduce,
            "attention_dim": self.attention_dim,
        }
        return " ".join(f"{k}={v}" for k, v in fields.items())

    @classmethod
    def from_manifest(cls, line: str) -> "ModelConfig":
        kv = dict(item.split("=", 1) for item in line.split())
        ints = lambda s: tuple(int(v) for v in s.split(","))
        trunk = TrunkConfig(kv["variant"], ints(kv["channels"]), ints(kv["blocks"]), ints(kv["strides"]),
                            int(kv["first_conv_stride"]), int(kv["n_mels"]), kv["freq_reduce"])
        return cls(trunk, kv["pooling"], int(kv["attention_dim"]), int(kv["embed_dim"]))


class SpeakerNet(Module):
    """Trunk, attentive pooling and a final linear layer producing the speaker embedding."""

    def __init__(self, config: ModelConfig, rng):
        self.config = config
        self.trunk = Trunk(config.trunk, rng)
        self.head = PoolingHead(config.pooling, config.trunk.frame_dim, rng, config.attention_dim)
        self.fc = Linear(self.head.out_dim, config.embed_dim, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return embed(self, features)


def embed(model: SpeakerNet, features) -> Tensor:
    """N x 1 x L x n_mels log-mel features to N x embed_dim embeddings (no output nonlinearity)."""
    if not isinstance(features, Tensor):
        features = Tensor(features)
    return model.fc(model.head(model.trunk(features)))
