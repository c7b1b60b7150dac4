"""Log-mel front end: pre-emphasis, framed FFT magnitude and a 64-band mel filterbank."""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .audio_io import SAMPLE_RATE, Waveform

FRAME_LEN = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 64
F_MIN = 125.0
F_MAX = 7500.0
LOG_FLOOR = 1e-6


@dataclass(frozen=True)
class PreEmphasisFilter:
    coefficient: float = 0.97

    def __post_init__(self):
        if not 0.0 <= self.coefficient < 1.0:
            raise ValueError(f"pre-emphasis coefficient must be in [0, 1), got {self.coefficient}")


@dataclass(frozen=True)
class MelFilterbankMatrix:
    weights: np.ndarray
    edges_hz: np.ndarray
    fmin: float = F_MIN
    fmax: float = F_MAX
    n_fft: int = N_FFT


@dataclass(frozen=True)
class LogMelFeature:
    values: np.ndarray  # frames x n_mels
    frame_shift: float = 0.010
    frame_len: float = 0.025

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def pre_emphasize(w: Waveform, f: PreEmphasisFilter = PreEmphasisFilter()) -> Waveform:
    x = w.samples
    if x.size < 2:
        raise ValueError("pre-emphasis needs at least 2 samples for reflect padding")
    prev = np.empty_like(x)
    prev[0] = x[1]
    prev[1:] = x[:-1]
    return Waveform(x - f.coefficient * prev, w.sample_rate)


@functools.lru_cache(maxsize=None)
def _window() -> np.ndarray:
    # periodic Hamming, as produced by the common tensor-library defaults
    win = get_window("hamming", FRAME_LEN, fftbins=True)
    win.setflags(write=False)
    return win


def frame_count(n_samples: int) -> int:
    return 1 + (n_samples - FRAME_LEN) // FRAME_SHIFT


def stft_magnitude(w: Waveform) -> np.ndarray:
    """Magnitude of the one-sided 512-point FFT of 25 ms Hamming frames, hop 10 ms."""
    x = w.samples
    if x.size < FRAME_LEN:
        raise ValueError(f"need at least {FRAME_LEN} samples, got {x.size}")
    frames = sliding_window_view(x, FRAME_LEN)[::FRAME_SHIFT]
    return np.abs(np.fft.rfft(frames * _window(), n=N_FFT, axis=1))


def build_mel_filterbank(n_mels: int = N_MELS, fmin: float = F_MIN, fmax: float = F_MAX,
                         n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> MelFilterbankMatrix:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    # pin the endpoints against round-trip error
    edges[0], edges[-1] = fmin, fmax
    centers = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (centers - lo) / (mid - lo)
    falling = (hi - centers) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbankMatrix(weights, edges, fmin, fmax, n_fft)


@functools.lru_cache(maxsize=None)
def _shared_filterbank(n_mels: int) -> np.ndarray:
    fb = build_mel_filterbank(n_mels).weights
    fb.setflags(write=False)
    return fb


def log_mel_features(w: Waveform, n_mels: int = N_MELS,
                     pre: PreEmphasisFilter = PreEmphasisFilter()) -> LogMelFeature:
    mag = stft_magnitude(pre_emphasize(w, pre))
    mel = mag @ _shared_filterbank(n_mels).T
    return LogMelFeature(np.log(np.maximum(mel, LOG_FLOOR)))


def batch_log_mel(signals: np.ndarray, n_mels: int = N_MELS) -> np.ndarray:
    """Features for a stack of equal-length signals, shaped N x 1 x frames x n_mels."""
    feats = [log_mel_features(Waveform(s), n_mels).values for s in signals]
    return np.stack(feats)[:, None, :, :]


_CACHE_HEADER = struct.Struct("<ii")


def write_feature_cache(path, feature: LogMelFeature) -> None:
    values = np.ascontiguousarray(feature.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(*values.shape))
        fh.write(values.tobytes())


def read_feature_cache(path) -> LogMelFeature:
    with open(path, "rb") as fh:
        head = fh.read(_CACHE_HEADER.size)
        if len(head) != _CACHE_HEADER.size:
            raise OSError(f"{path}: truncated feature header")
        frames, bands = _CACHE_HEADER.unpack(head)
        body = fh.read()
    if len(body) != frames * bands * 4:
        raise OSError(f"{path}: expected {frames * bands} floats, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(frames, bands)
    return LogMelFeature(values.astype(np.float64))
