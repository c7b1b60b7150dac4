"""Trial scoring, score normalisation and fusion, and EER / minDCF."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .audio_io import Waveform, eval_crops
from .dsp import batch_log_mel
from .errors import AlignmentError, DegenerateInputError, NumericError
from .tensor import no_grad


@dataclass(frozen=True)
class DcfParams:
    c_miss: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.05

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("detection costs must be positive")
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must lie strictly between 0 and 1")


@dataclass(frozen=True)
class ScoreSet:
    enroll: tuple
    test: tuple
    scores: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if not (len(self.enroll) == len(self.test) == scores.size):
            raise AlignmentError("enroll, test and scores lengths differ")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "enroll", tuple(self.enroll))
        object.__setattr__(self, "test", tuple(self.test))
        object.__setattr__(self, "scores", scores)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=bool)
            if labels.size != scores.size:
                raise AlignmentError(f"{labels.size} labels for {scores.size} scores")
            object.__setattr__(self, "labels", labels)

    @classmethod
    def from_arrays(cls, scores, labels=None) -> "ScoreSet":
        n = len(scores)
        ids = tuple(str(i) for i in range(n))
        return cls(ids, ids, scores, labels)

    def __len__(self):
        return self.scores.size


# ---------------------------------------------------------------- scoring

def _unit(rows, side):
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericError(f"{side} crop {int(zero[0])} has a zero-norm embedding")
    return rows / norms[:, None]


def pair_score(enroll_crops, test_crops) -> float:
    """Mean cosine similarity over every (enroll crop, test crop) combination."""
    return float(np.mean(_unit(enroll_crops, "enroll") @ _unit(test_crops, "test").T))


def embed_crops(model, w: Waveform) -> np.ndarray:
    """Embeddings of the ten evenly spaced 4-second crops of ``w``, 10 x embed_dim."""
    feats = batch_log_mel(eval_crops(w), model.config.trunk.n_mels)
    with no_grad():
        return np.asarray(model(feats).data, dtype=np.float64)


def score_trials(trials, crops_for) -> np.ndarray:
    """``crops_for(utt)`` returns the crop embeddings of an utterance."""
    return np.array([pair_score(crops_for(t.enroll_utt), crops_for(t.test_utt)) for t in trials])


# ---------------------------------------------------------------- normalisation / fusion

def minmax_normalize(scores: ScoreSet) -> ScoreSet:
    x = scores.scores
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise DegenerateInputError("cannot min-max normalise: all scores are equal")
    return replace(scores, scores=(x - lo) / (hi - lo))


def check_aligned(a: ScoreSet, b: ScoreSet) -> None:
    if len(a) != len(b):
        raise AlignmentError(f"score sets have {len(a)} and {len(b)} trials")
    for i, pair in enumerate(zip(a.enroll, a.test, b.enroll, b.test)):
        if pair[0] != pair[2] or pair[1] != pair[3]:
            raise AlignmentError(f"trial {i} differs: {pair[0]} {pair[1]} vs {pair[2]} {pair[3]}")


def fuse(scores_a: ScoreSet, scores_b: ScoreSet, w_a: float = 0.3, w_b: float = 0.7) -> ScoreSet:
    """Per-trial weighted average of two already-normalised score sets."""
    if w_a < 0 or w_b < 0 or not math.isclose(w_a + w_b, 1.0, abs_tol=1e-12):
        raise ValueError(f"weights must be non-negative and sum to 1, got {w_a} and {w_b}")
    check_aligned(scores_a, scores_b)
    a, b = scores_a.scores, scores_b.scores
    # clamp so rounding can never leave the segment [a, b]; makes a == b a fixed point
    return replace(scores_a, scores=np.clip(w_a * a + w_b * b, np.minimum(a, b), np.maximum(a, b)))


def normalize_and_fuse(scores_a: ScoreSet, scores_b: ScoreSet, w_a: float = 0.3, w_b: float = 0.7) -> ScoreSet:
    return fuse(minmax_normalize(scores_a), minmax_normalize(scores_b), w_a, w_b)


# ---------------------------------------------------------------- metrics

def _split(scores, labels):
    if isinstance(scores, ScoreSet):
        scores, labels = scores.scores, scores.labels if labels is None else labels
    if labels is None:
        raise ValueError("labels are required for EER / DCF")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tgt, non = scores[labels], scores[~labels]
    if tgt.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return scores, tgt, non


def error_curves(scores, labels=None):
    """Miss and false-accept rates at every distinct score used as threshold, then at +inf.

    A trial is accepted when its score is >= the threshold.
    """
    scores, tgt, non = _split(scores, labels)
    thresholds = np.unique(scores)
    misses = np.searchsorted(np.sort(tgt), thresholds, side="left")
    false_accepts = non.size - np.searchsorted(np.sort(non), thresholds, side="left")
    thresholds = np.append(thresholds, np.inf)
    miss = np.append(misses, tgt.size) / tgt.size
    fa = np.append(false_accepts, 0) / non.size
    return thresholds, miss, fa


def compute_eer(scores, labels=None):
    """Equal error rate and its threshold, interpolating linearly between bracketing sweep points."""
    thresholds, miss, fa = error_curves(scores, labels)
    i = int(np.argmax(miss >= fa))  # miss[0] = 0 < fa[0] = 1, and the +inf point has miss > fa
    if miss[i] == fa[i]:
        return float(miss[i]), float(thresholds[i] if np.isfinite(thresholds[i]) else thresholds[i - 1])
    gap_before = fa[i - 1] - miss[i - 1]
    gap_after = fa[i] - miss[i]
    t = gap_before / (gap_before - gap_after)
    eer = miss[i - 1] + t * (miss[i] - miss[i - 1])
    if np.isfinite(thresholds[i]):
        threshold = thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1])
    else:
        threshold = thresholds[i - 1]
    return float(eer), float(threshold)


def detection_cost(miss, fa, params: DcfParams = DcfParams()):
    return params.c_miss * miss * params.p_target + params.c_fa * fa * (1 - params.p_target)


def compute_min_dcf(scores, labels=None, params: DcfParams = DcfParams()):
    """Minimum of the (unnormalised) detection cost over all thresholds, including reject-all."""
    thresholds, miss, fa = error_curves(scores, labels)
    cost = detection_cost(miss, fa, params)
    i = int(np.argmin(cost))
    return float(cost[i]), float(thresholds[i])


# ---------------------------------------------------------------- files

def write_scores(path, scores: ScoreSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e, t, s in zip(scores.enroll, scores.test, scores.scores):
            fh.write(f"{e} {t} {float(s)!r}\n")


def read_scores(path) -> ScoreSet:
    enroll, test, values = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected '<enroll> <test> <score>'")
            enroll.append(fields[0])
            test.append(fields[1])
            values.append(float(fields[2]))
    return ScoreSet(enroll, test, np.array(values))


def attach_labels(scores: ScoreSet, trials) -> ScoreSet:
    """Check ``scores`` against a trial list and copy its target labels."""
    if len(scores) != len(trials):
        raise AlignmentError(f"{len(scores)} scores for {len(trials)} trials")
    for i, (e, t, trial) in enumerate(zip(scores.enroll, scores.test, trials)):
        if e != trial.enroll_utt or t != trial.test_utt:
            raise AlignmentError(f"trial {i} differs: {e} {t} vs {trial.enroll_utt} {trial.test_utt}")
    return replace(scores, labels=np.array([t.is_target for t in trials]))


def evaluation_report(scores: ScoreSet, params: DcfParams = DcfParams()) -> str:
    eer, eer_thr = compute_eer(scores)
    dcf, dcf_thr = compute_min_dcf(scores, params=params)
    n_tgt = int(scores.labels.sum())
    return "\n".join([
        f"# C_miss={params.c_miss:g} C_fa={params.c_fa:g} P_target={params.p_target:g}",
        f"trials {len(scores)} (target {n_tgt}, nontarget {len(scores) - n_tgt})",
        f"EER {100 * eer:.3f}% at threshold {eer_thr:.6f}",
        f"minDCF {dcf:.4f} at threshold {dcf_thr:.6f}",
    ]) + "\n"
