"""WAV I/O, trial lists and crop sampling."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TrialParseError, WavFormatError

SAMPLE_RATE = 16000
TRAIN_CROP = 32000
EVAL_CROP = 64000
EVAL_CROP_COUNT = 10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Trial:
    is_target: bool
    enroll_utt: str
    test_utt: str


@dataclass(frozen=True)
class CropPlan:
    crop_len: int
    count: int
    offsets: tuple[int, ...]


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            nframes = fh.getnframes()
            raw = fh.readframes(nframes)
    except wave.Error as exc:
        # the stdlib reader rejects non-PCM format tags here
        raise WavFormatError(f"{path}: format tag: {exc}") from exc
    except EOFError as exc:
        raise OSError(f"{path}: truncated WAV header") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels}, expected 1")
    if width != 2:
        raise WavFormatError(f"{path}: sample width={8 * width} bits, expected 16")
    if len(raw) != nframes * 2:
        raise OSError(f"{path}: truncated data chunk ({len(raw) // 2} of {nframes} frames)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def wrap_pad(samples: np.ndarray, length: int) -> np.ndarray:
    """Tile ``samples`` until it is at least ``length`` long."""
    if samples.size >= length:
        return samples
    reps = -(-length // samples.size)
    return np.tile(samples, reps)[:length]


def sample_train_crop(w: Waveform, rng: np.random.Generator, crop_len: int = TRAIN_CROP) -> Waveform:
    samples = wrap_pad(w.samples, crop_len)
    offset = int(rng.integers(0, samples.size - crop_len + 1))
    return Waveform(samples[offset:offset + crop_len], w.sample_rate)


def plan_eval_crops(signal_len: int, crop_len: int = EVAL_CROP, count: int = EVAL_CROP_COUNT) -> CropPlan:
    padded = max(int(signal_len), crop_len)
    span = padded - crop_len
    offsets = tuple(int(round(i * span / (count - 1))) for i in range(count))
    return CropPlan(crop_len, count, offsets)


def eval_crops(w: Waveform, crop_len: int = EVAL_CROP, count: int = EVAL_CROP_COUNT) -> np.ndarray:
    """Return a ``count x crop_len`` array of evenly spaced crops."""
    samples = wrap_pad(w.samples, crop_len)
    plan = plan_eval_crops(samples.size, crop_len, count)
    return np.stack([samples[o:o + crop_len] for o in plan.offsets])


def parse_trial_list(path) -> list[Trial]:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise TrialParseError(lineno, f"expected 3 fields, got {len(fields)}")
            label, enroll, test = fields
            if label not in ("0", "1"):
                raise TrialParseError(lineno, f"label must be 0 or 1, got {label!r}")
            trials.append(Trial(label == "1", enroll, test))
    return trials


def write_trial_list(path, trials) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{int(t.is_target)} {t.enroll_utt} {t.test_utt}\n")


def load_speaker_dataset(root) -> tuple[list[tuple[Path, int]], list[str]]:
    """Index ``root/<speaker>/**.wav`` into (path, speaker index) pairs."""
    root = Path(root)
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    items = []
    for idx, spk in enumerate(speakers):
        for wav in sorted((root / spk).rglob("*.wav")):
            items.append((wav, idx))
    return items, speakers
