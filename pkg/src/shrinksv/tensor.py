"""Dense tensors with reverse-mode gradients and the handful of layers the speaker net needs.

Each op computes its forward value eagerly with numpy and, if any input
requires a gradient, records a closure mapping the upstream gradient to one
gradient per input.  ``Tensor.backward`` replays those closures in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import struct
import threading

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_local = threading.local()


def set_precision(name: str) -> None:
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}") from None


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = "f64" if _dtype is np.float64 else "f32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward) -> "Tensor":
        """Wrap an op result; ``backward(g)`` must return one gradient (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1 - y),))


def abs_op(x: Tensor) -> Tensor:
    # np.sign gives the 0 subgradient at 0
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    return Tensor.from_op(x.data.mean(axis=axis), (x,),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),))


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    """(kh*kw*C) x (N*ho*wo) column matrix of a padded N x C x H x W array."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(kh * kw * c, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Cross-correlation of N x C x H x W input with an O x C x kh x kw kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (gmat @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            return None, gk
        # input gradient = full correlation of the stride-dilated output gradient
        # with the spatially flipped, channel-swapped kernel
        hp, wp = h + 2 * pad, w + 2 * pad
        gd = np.zeros((n, o, hp + kh - 1, wp + kw - 1), dtype=g.dtype)
        gd[:, :, kh - 1:kh - 1 + stride * ho:stride, kw - 1:kw - 1 + stride * wo:stride] = g
        flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
        gxp = (flipped @ _im2col(gd, kh, kw, 1, hp, wp)).reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
        return gxp[:, :, pad:pad + h, pad:pad + w], gk

    return Tensor.from_op(np.ascontiguousarray(out), (x, kernel), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except 1 (works for N x C and N x C x H x W)."""
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.data.size // x.shape[1]
    if training:
        if count < 2:
            raise DegenerateInputError(f"batch_norm in training mode needs >= 2 values per channel, got {count}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.astype(x.data.dtype), running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,),
                          lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------- modules

class Module:
    """Container whose Tensor attributes are parameters and ndarray attributes are buffers."""

    training = True

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Module, Tensor, np.ndarray)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix=""):
        for key, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict):
        params, buffers = dict(self.named_parameters()), dict(self.named_buffers())
        missing = (params.keys() | buffers.keys()) - state.keys()
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.asarray(state[name], dtype=_dtype).copy()
        for name, buf in buffers.items():
            buf[...] = state[name]


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, rng, kernel_size=3, stride=1, pad=1):
        fan_in = in_ch * kernel_size * kernel_size
        self.weight = parameter(rng.standard_normal((out_ch, in_ch, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return conv2d(x, self.weight, self.stride, self.pad)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, (out_dim, in_dim)))
        self.bias = parameter(rng.uniform(-bound, bound, out_dim))

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


# ---------------------------------------------------------------- gradient check

def grad_check(op, inputs, eps=1e-5, max_coords=400, seed=0) -> float:
    """Largest |analytic - numeric| / max(1, |analytic|, |numeric|) over checked coordinates.

    ``op(*inputs)`` must return a Tensor.  Its output is contracted with a fixed
    random projection so every output element contributes.  Tensors larger than
    ``max_coords`` are checked on a random subset of that many coordinates.
    """
    if _dtype is not np.float64:
        raise RuntimeError("grad_check requires 64-bit precision")
    rng = np.random.default_rng(seed)
    out = op(*inputs)
    proj = rng.standard_normal(out.shape)
    for t in inputs:
        t.grad = None
    out.backward(proj)

    def objective():
        value = float(np.sum(op(*inputs).data * proj))
        if not np.isfinite(value):
            raise NumericError("non-finite objective during finite differences")
        return value

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {t!r}")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = objective()
            flat[idx] = orig - eps
            down = objective()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# ---------------------------------------------------------------- checkpoint container

def save_tensors(path, tensors: dict) -> None:
    """Write named arrays as count, then per entry: name, rank, dims, little-endian float32 data."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise OSError(f"{path}: truncated tensor container")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(blob):
            raise OSError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 4 * n
    return out
