"""Additive-margin softmax on cosine logits, with hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .tensor import Module, Tensor, parameter

DEFAULT_MARGIN = 0.2
DEFAULT_SCALE = 30.0


@dataclass
class AmSoftmaxParams:
    weight: np.ndarray  # classes x embed_dim, rows normalised at use
    m: float = DEFAULT_MARGIN
    s: float = DEFAULT_SCALE

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        if not 0 <= self.m < 1:
            raise ValueError(f"margin must be in [0, 1), got {self.m}")
        if self.weight.ndim != 2 or self.weight.shape[0] < 2:
            raise ValueError(f"need at least 2 classes, weight has shape {self.weight.shape}")


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError(f"zero-norm {what} row {int(np.argmax(norms.ravel() == 0))}")
    return x / norms, norms


def _forward(emb, weight, labels, m, s):
    labels = np.asarray(labels)
    if labels.shape != (emb.shape[0],):
        raise ValueError(f"expected {emb.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= weight.shape[0]):
        raise ValueError(f"labels must lie in [0, {weight.shape[0]})")
    xn, xnorm = _unit_rows(emb, "embedding")
    wn, wnorm = _unit_rows(weight, "class weight")
    cos = xn @ wn.T
    rows = np.arange(emb.shape[0])
    logits = s * cos
    logits[rows, labels] -= s * m
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[rows, labels]))
    return loss, (xn, xnorm, wn, wnorm, cos, shifted, logsumexp, labels, rows)


def _backward(cache, s, scale=1.0):
    xn, xnorm, wn, wnorm, cos, shifted, logsumexp, labels, rows = cache
    n = xn.shape[0]
    prob = np.exp(shifted - logsumexp[:, None])
    prob[rows, labels] -= 1.0
    g_cos = prob * (s * scale / n)
    g_xn = g_cos @ wn
    g_wn = g_cos.T @ xn
    # d(x/|x|) projects out the radial component
    g_emb = (g_xn - xn * np.sum(g_xn * xn, axis=1, keepdims=True)) / xnorm
    g_weight = (g_wn - wn * np.sum(g_wn * wn, axis=1, keepdims=True)) / wnorm
    return g_emb, g_weight


def am_softmax_loss(embeddings, labels, params: AmSoftmaxParams):
    """Mean AM-Softmax cross-entropy and its gradients w.r.t. embeddings and class weights."""
    emb = np.asarray(embeddings, dtype=np.float64)
    loss, cache = _forward(emb, params.weight, labels, params.m, params.s)
    g_emb, g_weight = _backward(cache, params.s)
    return loss, {"embeddings": g_emb, "weight": g_weight}


def cosine_logits(embeddings, weight) -> np.ndarray:
    xn, _ = _unit_rows(np.asarray(embeddings), "embedding")
    wn, _ = _unit_rows(np.asarray(weight), "class weight")
    return xn @ wn.T


class AmSoftmax(Module):
    """Trainable class matrix plus the loss as a graph op."""

    def __init__(self, embed_dim, n_classes, rng, margin=DEFAULT_MARGIN, scale=DEFAULT_SCALE):
        self.weight = parameter(rng.standard_normal((n_classes, embed_dim)) * np.sqrt(2.0 / embed_dim))
        AmSoftmaxParams(self.weight.data, margin, scale)  # validate
        self.margin, self.scale = margin, scale

    def __call__(self, embeddings: Tensor, labels):
        """Return (scalar loss Tensor, count of correct plain-cosine argmax predictions)."""
        loss, cache = _forward(embeddings.data, self.weight.data, labels, self.margin, self.scale)
        correct = int(np.sum(np.argmax(cache[4], axis=1) == cache[7]))

        def backward(g):
            return _backward(cache, self.scale, float(g))

        dtype = embeddings.data.dtype
        return Tensor.from_op(np.asarray(loss, dtype=dtype), (embeddings, self.weight), backward), correct


def grad_am_softmax_check(n=4, c=5, dim=8, m=DEFAULT_MARGIN, s=DEFAULT_SCALE, eps=1e-6, seed=0) -> float:
    """Finite-difference check of ``am_softmax_loss`` on a random instance; returns max relative error."""
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((n, dim))
    weight = rng.standard_normal((c, dim))
    labels = rng.integers(c, size=n)
    _, grads = am_softmax_loss(emb, labels, AmSoftmaxParams(weight, m, s))
    worst = 0.0
    for key, arr in (("embeddings", emb), ("weight", weight)):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = am_softmax_loss(emb, labels, AmSoftmaxParams(weight, m, s))[0]
            arr[idx] = orig - eps
            down = am_softmax_loss(emb, labels, AmSoftmaxParams(weight, m, s))[0]
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = grads[key][idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


def am_decision(cosines, m) -> int:
    """Class whose cosine beats every other by more than ``m``; -1 inside the margin band."""
    cosines = np.asarray(cosines, dtype=np.float64)
    best = int(np.argmax(cosines))
    others = np.delete(cosines, best)
    return best if cosines[best] - m > others.max() else -1


def margin_boundary_gap(params: AmSoftmaxParams, pair=(0, 1)) -> float:
    """Drop in class-``pair[0]`` cosine across the band between the two AM decision boundaries.

    Works in the plane spanned by the two (normalised) class rows.  P1 is the
    point where class 1 just wins under the margin (cos1 - m = cos2) and P2 the
    mirror point where class 2 just wins; the returned value is
    cos(W1, P1) - cos(W1, P2).
    """
    w1, w2 = (params.weight[i] / np.linalg.norm(params.weight[i]) for i in pair)
    delta = float(np.arccos(np.clip(w1 @ w2, -1.0, 1.0)))
    if params.m == 0:
        return 0.0
    reach = 2 * np.sin(delta / 2)
    if params.m > reach:
        raise ValueError(f"margin {params.m} exceeds the largest attainable cosine gap {reach:.6f}")
    e2 = w2 - (w2 @ w1) * w1
    e2 /= np.linalg.norm(e2)
    # along the arc, cos1 - cos2 = 2 sin(delta/2) sin(delta/2 - phi)
    shift = np.arcsin(params.m / reach)
    p1 = np.cos(delta / 2 - shift) * w1 + np.sin(delta / 2 - shift) * e2
    p2 = np.cos(delta / 2 + shift) * w1 + np.sin(delta / 2 + shift) * e2
    return float(w1 @ p1 - w1 @ p2)
