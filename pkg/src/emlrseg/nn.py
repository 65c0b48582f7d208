"""Parameter containers, layers and the AdamW optimiser."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-walking parameter registry.

    Parameters and sub-modules are discovered in attribute insertion order,
    so name paths are stable for a given construction sequence.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        bad = [f"{k}: {own[k].shape} vs {np.shape(v)}" for k, v in state.items()
               if k in own and own[k].shape != np.shape(v)]
        if bad:
            raise ValueError("shape mismatch: " + "; ".join(bad))
        for k, v in state.items():
            if k in own:
                own[k].data = np.array(v, dtype=own[k].dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast parameters and float buffers in place (recursively)."""
        for key, val in list(vars(self).items()):
            if isinstance(val, Parameter):
                val.data = val.data.astype(dtype)
            elif isinstance(val, Module):
                val.astype(dtype)
            elif isinstance(val, np.ndarray) and val.dtype.kind == "f":
                setattr(self, key, val.astype(dtype))
        return self

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self.eps)


# ----------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.05, decay_mask: dict[str, bool] | None = None) -> None:
    """One in-place AdamW update over name-keyed arrays.

    Decay is decoupled (``p -= lr * wd * p``) and moments are bias-corrected.
    Entries whose gradient is ``None`` are treated as zero-gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        wd = weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        if wd:
            p -= (lr * wd) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


class AdamW:
    """AdamW over a module's named parameters; 1-D params are not decayed."""

    def __init__(self, named_params: list[tuple[str, Parameter]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.named = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()
        self.decay_mask = {n: p.ndim >= 2 for n, p in self.named}

    def step(self, lr: float | None = None) -> None:
        params = {n: p.data for n, p in self.named}
        grads = {n: p.grad for n, p in self.named}
        adamw_step(params, grads, self.state, self.lr if lr is None else lr, self.betas[0], self.betas[1],
                   self.eps, self.weight_decay, self.decay_mask)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None
