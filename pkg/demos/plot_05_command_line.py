"""
The whole pipeline from the command line
========================================

Writes a synthetic corpus as WAV files, then drives ``train``, ``score``,
``evaluate`` and ``fuse`` through the ``shrinksv`` entry point.  The same
calls work from a shell as ``python -m shrinksv <command> ...``.
"""

import tempfile
from pathlib import Path

from shrinksv.audio_io import write_trial_list
from shrinksv.cli import main
from shrinksv.synthetic import all_pairs_trials, make_corpus, speaker_recipes, write_corpus

work = Path(tempfile.mkdtemp(prefix="shrinksv-"))
recipes = speaker_recipes(4, seed=11)
train_rel = write_corpus(work / "train", make_corpus(recipes, 3, 32000, seed=1))
test_rel = write_corpus(work / "test", make_corpus(recipes, 2, 48000, seed=2))
print("corpus under", work)

# a flat key=value config; flags and SHRINKSV_* variables override it
(work / "train.cfg").write_text(
    f"dataset = {work / 'train'}\n"
    f"output = {work / 'run'}\n"
    "channels = 8,8,16,16\nblocks = 1,1,1,1\n"
    "epochs = 6\nbatch_size = 6\ncrop_len = 16000\n"
)
main(["train", "--config", str(work / "train.cfg"), "--seed", "3"])
print((work / "run" / "metrics.csv").read_text())

labels = [int(p.split("/")[0][3:]) for p in test_rel]
write_trial_list(work / "trials.txt", all_pairs_trials(test_rel, labels))
main(["score", "--checkpoint", str(work / "run" / "epoch_005.ckpt"), "--trials", str(work / "trials.txt"),
      "--wav-root", str(work / "test"), "--output", str(work / "a.txt"), "--workers", "2"])
main(["evaluate", "--scores", str(work / "a.txt"), "--trials", str(work / "trials.txt")])

# an earlier checkpoint stands in for a second system
main(["score", "--checkpoint", str(work / "run" / "epoch_001.ckpt"), "--trials", str(work / "trials.txt"),
      "--wav-root", str(work / "test"), "--output", str(work / "b.txt")])
main(["fuse", "--scores-a", str(work / "a.txt"), "--scores-b", str(work / "b.txt"),
      "--trials", str(work / "trials.txt"), "--output", str(work / "fused.txt")])
main(["evaluate", "--scores", str(work / "fused.txt"), "--trials", str(work / "trials.txt")])
