"""
Training a tiny verifier on synthetic speakers
==============================================

Eight sinusoid-mixture speakers, a narrow one-block-per-stage trunk and
AM-Softmax.  Held-out utterances are then scored with the ten-crop protocol.
Takes a couple of minutes on one core.
"""

import numpy as np

from shrinksv import tensor
from shrinksv.amsoftmax import AmSoftmax
from shrinksv.shrinkage import ModelConfig, SpeakerNet
from shrinksv.synthetic import all_pairs_trials, make_corpus, speaker_recipes
from shrinksv.trainer import TrainConfig, train
from shrinksv.verification import compute_eer, compute_min_dcf, embed_crops, pair_score

tensor.set_precision("f64")
recipes = speaker_recipes(8, seed=2020)
train_set = make_corpus(recipes, 4, 40000, seed=1)
held_out = make_corpus(recipes, 3, 64000, seed=2)

rng = np.random.default_rng(9)
config = ModelConfig.preset("Q", "SAP", stage_channels=(8, 8, 16, 16), blocks_per_stage=(1, 1, 1, 1))
model = SpeakerNet(config, rng)
loss = AmSoftmax(512, len(recipes), rng, margin=0.2, scale=30.0)
print("model parameters:", model.num_parameters())

result = train(TrainConfig(batch_size=16, epochs=30, seed=9), model, loss, train_set)
for epoch, step, lr, value, acc in result.history[::5]:
    print(f"epoch {epoch:2d}  step {step:3d}  lr {lr:.6f}  loss {value:7.3f}  acc {acc:.3f}")

# ten 4 s crops per utterance, 100 cosine pairs per trial
crops = [embed_crops(model, w) for w, _ in held_out]
labels = [k for _, k in held_out]
trials = all_pairs_trials(list(range(len(held_out))), labels)
scores = np.array([pair_score(crops[t.enroll_utt], crops[t.test_utt]) for t in trials])
targets = np.array([t.is_target for t in trials])
eer, thr = compute_eer(scores, targets)
dcf, _ = compute_min_dcf(scores, targets)
print(f"{len(trials)} trials: EER {100 * eer:.2f}% at {thr:.3f}, minDCF {dcf:.4f}")
print("mean target score", scores[targets].mean().round(3), "nontarget", scores[~targets].mean().round(3))
