"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node on the active ``Tape``;
``backward`` walks the tape in reverse append order and accumulates
gradients additively into ``Tensor.grad``. There is no general
broadcasting: operands must have equal shapes, or one side is a python
scalar, or a dedicated op (``add_bias``) handles the specific pattern.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-dimensional float64 array, optionally tracked on a tape.

    ``data`` is treated as immutable while a tape is recording; only
    ``grad`` buffers accumulate, and optimizers may rewrite ``data``
    between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable ops; one per training step."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(inputs: Sequence, out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor, appending a tape node when tracked.

    ``backward_fn(grad)`` must return one gradient array (or None) per
    entry of ``inputs``; non-Tensor inputs always receive None.
    """
    tape = active_tape()
    track = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(out_data, requires_grad=track)
    if track:
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(x) into every reachable tensor's ``grad``."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward requires an active Tape")
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.tape_id is None or tape.nodes[loss.tape_id].out is not loss:
        raise ValueError("loss is not a node of the active tape")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def _as_scalar(x):
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b):
    s = _as_scalar(b)
    if s is not None:
        return record([a], a.data + s, lambda g: (g,))
    _check_same_shape("add", a, b)
    return record([a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b):
    s = _as_scalar(b)
    if s is not None:
        return record([a], a.data - s, lambda g: (g,))
    _check_same_shape("sub", a, b)
    return record([a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b):
    s = _as_scalar(b)
    if s is not None:
        return record([a], a.data * s, lambda g: (g * s,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record([a, b], ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b):
    s = _as_scalar(b)
    if s is not None:
        return record([a], a.data / s, lambda g: (g / s,))
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    return record([a, b], ad / bd, lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a: Tensor):
    return record([a], -a.data, lambda g: (-g,))


def relu(a: Tensor):
    """Rectifier with subgradient 0 at exactly 0."""
    mask = a.data > 0.0
    return record([a], np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def gelu(a: Tensor):
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return record([a], x * phi, bwd)


def add_bias(x: Tensor, b: Tensor):
    """Add ``b`` along all trailing axes of ``x`` (b.shape == x.shape[1:])."""
    if b.data.shape != x.data.shape[1:]:
        raise ValueError(
            f"add_bias: bias shape {b.data.shape} does not match "
            f"trailing dims of {x.data.shape}"
        )
    return record([x, b], x.data + b.data, lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape):
    shape = tuple(shape)
    old = x.data.shape
    return record([x], x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record([x], x.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int):
    datas = [t.data for t in tensors]
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ValueError(f"concat: incompatible shapes {base} vs {other}")
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(list(tensors), np.concatenate(datas, axis=axis), bwd)


def sum_all(x: Tensor):
    shape = x.data.shape
    return record(
        [x], np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape),)
    )


def sum_axes(x: Tensor, axes):
    """Sum over ``axes`` (removed from the result)."""
    axes = tuple(sorted(axes))
    shape = x.data.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bwd(g):
        return (np.broadcast_to(g.reshape(keep), shape),)

    return record([x], x.data.sum(axis=axes), bwd)


def mean_all(x: Tensor):
    return mul(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor):
    """Batched matrix product; leading (batch) dims must match exactly."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2D, got {ad.shape}, {bd.shape}")
    if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {ad.shape} vs {bd.shape}")

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return record([a, b], ad @ bd, bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None):
    """Affine map on the last axis: x[..., F_in] @ w[F_out, F_in].T + b."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear: shape mismatch {xd.shape} vs weight {wd.shape}")
    out = xd @ wd.T
    if b is not None:
        if b.data.shape != (wd.shape[0],):
            raise ValueError(f"linear: bias shape {b.data.shape} != ({wd.shape[0]},)")
        out = out + b.data

    x2 = xd.reshape(-1, xd.shape[-1])

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        gb = g2.sum(axis=0) if b is not None else None
        return (g @ wd, g2.T @ x2, gb)

    return record([x, w, b], out, bwd)


# ---------------------------------------------------------------------------
# normalizing nonlinearities


def _check_finite(op, x):
    if not np.isfinite(x.data).all():
        raise ValueError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int):
    _check_finite("softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record([x], y, bwd)


def log_softmax(x: Tensor, axis: int):
    _check_finite("log_softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return record([x], ls, bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            f"layernorm: affine shapes {gamma.data.shape}/{beta.data.shape} != ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        gx_hat = g * gamma.data
        lead = tuple(range(g.ndim - 1))
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return record([x, gamma, beta], gamma.data * xhat + beta.data, bwd)
