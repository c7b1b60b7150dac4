"""Additive-noise and reverberation augmentation in the MUSAN/RIR style."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve

from .audio_io import Waveform, read_wav, wrap_pad
from .errors import ConfigurationError, DegenerateInputError

KINDS = ("none", "speech", "music", "noise", "rir")


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str
    snr_range: tuple[float, float] | None = None
    source_count_range: tuple[int, int] = (1, 1)


POLICIES = {
    "none": AugmentationPolicy("none"),
    "speech": AugmentationPolicy("speech", (13.0, 20.0), (3, 7)),
    "music": AugmentationPolicy("music", (5.0, 15.0), (1, 1)),
    "noise": AugmentationPolicy("noise", (0.0, 15.0), (1, 1)),
    "rir": AugmentationPolicy("rir"),
}


@dataclass
class NoiseCorpusIndex:
    speech: list = field(default_factory=list)
    music: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    rir: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root) -> "NoiseCorpusIndex":
        """Collect WAV paths from ``root/{speech,music,noise,rir}/``."""
        root = Path(root)
        if not root.is_dir():
            raise ConfigurationError(f"corpus root {root} is not a directory")
        lists = {}
        for kind in ("speech", "music", "noise", "rir"):
            sub = root / kind
            lists[kind] = sorted(sub.rglob("*.wav")) if sub.is_dir() else []
        return cls(**lists)


@dataclass(frozen=True)
class RirFilter:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64).ravel()
        if taps.size == 0 or not np.all(np.isfinite(taps)):
            raise ValueError("RIR taps must be non-empty and finite")
        object.__setattr__(self, "taps", taps)


@dataclass(frozen=True)
class AugmentationPlan:
    """One drawn recipe: which files to mix in and at what SNRs."""
    kind: str
    sources: tuple = ()
    snrs_db: tuple = ()


def _power(x):
    return float(np.mean(np.square(x)))


def scaled_noise(signal: Waveform, noise: Waveform, snr_db: float) -> np.ndarray:
    """Noise fitted to the signal length and scaled so that signal/noise power hits ``snr_db``."""
    s = signal.samples
    n = wrap_pad(noise.samples, s.size)[:s.size]
    ps, pn = _power(s), _power(n)
    if ps == 0.0:
        raise DegenerateInputError("signal has zero power")
    if pn == 0.0:
        raise DegenerateInputError("noise has zero power")
    return np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0))) * n


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    return Waveform(signal.samples + scaled_noise(signal, noise, snr_db), signal.sample_rate)


def apply_rir(signal: Waveform, rir: RirFilter) -> Waveform:
    energy = float(np.sum(np.square(rir.taps)))
    if energy == 0.0:
        raise DegenerateInputError("RIR is all zeros")
    taps = rir.taps / np.sqrt(energy)
    out = convolve(signal.samples, taps, mode="full")[:len(signal)]
    return Waveform(out, signal.sample_rate)


def plan_augmentation(index: NoiseCorpusIndex, rng: np.random.Generator, kind: str | None = None) -> AugmentationPlan:
    """Draw a recipe uniformly from ``KINDS`` (or use ``kind``) and its random settings."""
    if kind is None:
        kind = KINDS[int(rng.integers(len(KINDS)))]
    if kind not in POLICIES:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    if kind == "none":
        return AugmentationPlan("none")
    pool = getattr(index, kind)
    if not pool:
        raise ConfigurationError(f"augmentation corpus has no {kind!r} files")
    policy = POLICIES[kind]
    lo, hi = policy.source_count_range
    count = int(rng.integers(lo, hi + 1))
    picks = tuple(pool[int(i)] for i in rng.integers(len(pool), size=count))
    if policy.snr_range is None:
        return AugmentationPlan(kind, picks)
    snrs = tuple(float(v) for v in rng.uniform(*policy.snr_range, size=count))
    return AugmentationPlan(kind, picks, snrs)


def apply_plan(signal: Waveform, plan: AugmentationPlan, loader=read_wav) -> Waveform:
    if plan.kind == "none":
        return signal
    if plan.kind == "rir":
        return apply_rir(signal, RirFilter(loader(plan.sources[0]).samples))
    # each source is scaled against the clean signal, then all are summed
    added = np.zeros(len(signal))
    for src, snr in zip(plan.sources, plan.snrs_db):
        added += scaled_noise(signal, loader(src), snr)
    return Waveform(signal.samples + added, signal.sample_rate)


def augment(signal: Waveform, index: NoiseCorpusIndex, rng: np.random.Generator,
            kind: str | None = None, loader=read_wav) -> Waveform:
    return apply_plan(signal, plan_augmentation(index, rng, kind), loader)
