"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When gradients are enabled and any
input requires them, the op records its parents and a closure mapping the
output gradient to per-parent gradients. :meth:`Tensor.backward` walks that
tape in reverse topological order and frees it afterwards.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.ndim > 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ----------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _make(out, (x,), backward)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise SmoothL1: 0.5 d^2 / beta if |d| < beta else |d| - 0.5 beta."""
    pred, target = _binary_operands(pred, target)
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    if beta > 0:
        out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    else:
        out = ad
    out = out.astype(d.dtype, copy=False)

    def backward(g):
        if beta > 0:
            local = np.where(quad, d / beta, np.sign(d))
        else:
            local = np.sign(d)
        gd = (g * local).astype(d.dtype, copy=False)
        return _unbroadcast(gd, pred.shape), _unbroadcast(-gd, target.shape)

    return _make(out, (pred, target), backward)


def abs_diff(pred: Tensor, target: Tensor) -> Tensor:
    return smooth_l1(pred, target, beta=0.0)


# ----------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(np.stack([t.data for t in xs], axis=axis), xs, backward)


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis``.

    A 1-D ``index`` picks the same positions for every leading slice; an
    index with the same leading dims as ``x`` (up to ``axis``) selects per
    slice, like ``np.take_along_axis``.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    n = x.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"gather index out of range for axis of size {n}")
    if index.ndim == 1:
        out = np.take(x.data, index, axis=axis)

        def backward(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
            return (full,)

        return _make(out, (x,), backward)

    if index.ndim != axis + 1:
        raise DimensionError(f"batched gather index {index.shape} must cover dims up to axis {axis} of {x.shape}")
    full_idx = index.reshape(index.shape + (1,) * (x.ndim - axis - 1))
    out = np.take_along_axis(x.data, full_idx, axis=axis)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        lead = np.indices(index.shape, sparse=True)[:axis]
        np.add.at(full, tuple(lead) + (index,), g)
        return (full,)

    return _make(out, (x,), backward)


def scatter(src: Tensor, index, size: int, axis: int = 0) -> Tensor:
    """Place slices of ``src`` at ``index`` along ``axis`` of a zero tensor.

    Repeated indices accumulate. ``scatter(gather(x, i), i, n)`` restores x
    at the positions in ``i`` when ``i`` is duplicate-free.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % src.ndim
    if index.ndim != 1 or index.shape[0] != src.shape[axis]:
        raise DimensionError(f"scatter index {index.shape} does not match src axis {axis} of {src.shape}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError(f"scatter index out of range for size {size}")
    shape = list(src.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=src.dtype)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(src.data, axis, 0))
    return _make(out, (src,), lambda g: (np.take(g, index, axis=axis),))


def repeat_nearest(x: Tensor, factor: int, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor along two axes."""
    out = x.data
    for ax in axes:
        out = np.repeat(out, factor, axis=ax)
    shape = x.shape

    def backward(g):
        a0, a1 = (ax % g.ndim for ax in axes)
        new_shape = list(g.shape)
        new_shape[a1:a1 + 1] = [shape[a1], factor]
        new_shape[a0:a0 + 1] = [shape[a0], factor]
        g = g.reshape(new_shape)
        return (g.sum(axis=(a0 + 1, a1 + 2)),)

    return _make(out, (x,), backward)


# ----------------------------------------------------------------------
# reductions and normalisation


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm affine params {gain.shape}/{bias.shape} do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits[N, K]`` against integer ``labels[N]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy expects logits [N, K] and labels [N], got {logits.shape} and {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of class range [0, {k}): min {labels.min()}, max {labels.max()}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ----------------------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
