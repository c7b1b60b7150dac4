"""
From waveform to log-mel frames
===============================

A synthetic voice goes through pre-emphasis, a Hamming-windowed STFT and a
64-band mel filterbank.  Everything is plain numpy.
"""

import numpy as np

from shrinksv.audio_io import sample_train_crop
from shrinksv.dsp import build_mel_filterbank, log_mel_features
from shrinksv.synthetic import speaker_recipes, synth_utterance

# one "speaker" is a fixed mixture of four sinusoids
recipe = speaker_recipes(1, seed=5)[0]
print("component frequencies (Hz):", np.round(recipe.freqs, 1))

rng = np.random.default_rng(0)
wave = synth_utterance(recipe, 48000, rng)
print("utterance:", len(wave), "samples at", wave.sample_rate, "Hz")

# training draws a random 2 s window
crop = sample_train_crop(wave, rng, 32000)
feat = log_mel_features(crop)
print("2 s crop ->", feat.values.shape, "(frames x mel bands)")

# the filterbank: 64 triangles spanning 125 Hz to 7.5 kHz over 257 FFT bins
bank = build_mel_filterbank()
print("filterbank:", bank.weights.shape, "edges", bank.edges_hz[0], "to", bank.edges_hz[-1], "Hz")

# the loudest bands should sit near the recipe frequencies
centre_bins = np.argmax(bank.weights, axis=1) * 16000 / 512
loud = np.argsort(feat.values.mean(axis=0))[-4:]
print("loudest bands centred at (Hz):", np.sort(np.round(centre_bins[loud])))
