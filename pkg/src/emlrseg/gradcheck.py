"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place.

    ``indices`` restricts the check to a subset of flat positions; other
    entries of the result stay NaN.
    """
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("numeric_grad needs a contiguous array to perturb in place")
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        _fill(fn, flat, out, idx, h)
    return out.reshape(arr.shape)


def _fill(fn, flat, out, idx, h):
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)


SCALE_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    """Largest absolute difference scaled by the larger of the two gradients' max magnitude.

    The scale never drops below ``floor`` so identically-zero gradients (e.g. a
    key bias under softmax shift invariance) compare round-off against round-off
    as an absolute error.
    """
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def check_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                max_entries: int | None = None, seed: int = 0) -> list[float]:
    """Backprop once, then compare each param's grad with finite differences.

    Returns one relative error per parameter.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    errs = []
    for p, a in zip(params, analytic):
        idx = None
        if max_entries is not None and p.data.size > max_entries:
            idx = rng.choice(p.data.size, size=max_entries, replace=False)
        num = numeric_grad(lambda: float(loss_fn().data), p.data, h, idx)
        errs.append(rel_error(a, num))
    return errs
