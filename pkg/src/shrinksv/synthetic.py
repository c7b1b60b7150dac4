"""Synthetic "speakers": fixed sinusoid mixtures with per-utterance jitter and noise."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import SAMPLE_RATE, Trial, Waveform, write_wav


@dataclass(frozen=True)
class SpeakerRecipe:
    freqs: tuple
    amps: tuple


def speaker_recipes(count: int, components: int = 4, seed: int = 1234) -> list[SpeakerRecipe]:
    rng = np.random.default_rng(seed)
    recipes = []
    for _ in range(count):
        freqs = np.sort(rng.uniform(150.0, 4000.0, components))
        amps = rng.uniform(0.3, 1.0, components)
        recipes.append(SpeakerRecipe(tuple(freqs), tuple(amps)))
    return recipes


def synth_utterance(recipe: SpeakerRecipe, n_samples: int, rng: np.random.Generator,
                    noise_level: float = 0.05, jitter: float = 0.02) -> Waveform:
    t = np.arange(n_samples) / SAMPLE_RATE
    x = np.zeros(n_samples)
    for f, a in zip(recipe.freqs, recipe.amps):
        f = f * (1 + rng.uniform(-jitter, jitter))
        x += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    # slow syllable-rate loudness envelope
    rate = rng.uniform(2.0, 5.0)
    x *= 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    x += noise_level * rng.standard_normal(n_samples) * np.abs(x).max()
    return Waveform(0.5 * x / np.abs(x).max())


def make_corpus(recipes, per_speaker: int, n_samples: int, seed: int) -> list[tuple[Waveform, int]]:
    rng = np.random.default_rng(seed)
    return [(synth_utterance(r, n_samples, rng), k)
            for k, r in enumerate(recipes) for _ in range(per_speaker)]


def all_pairs_trials(ids, labels) -> list[Trial]:
    trials = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            trials.append(Trial(labels[i] == labels[j], ids[i], ids[j]))
    return trials


def write_corpus(root, corpus, prefix="utt") -> list[str]:
    """Write ``root/spkNN/<prefix>MMM.wav`` files; returns relative paths in corpus order."""
    root = Path(root)
    rel = []
    counts = {}
    for w, label in corpus:
        n = counts.get(label, 0)
        counts[label] = n + 1
        path = Path(f"spk{label:02d}") / f"{prefix}{n:03d}.wav"
        (root / path.parent).mkdir(parents=True, exist_ok=True)
        write_wav(root / path, w)
        rel.append(path.as_posix())
    return rel
