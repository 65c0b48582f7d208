"""Patch tokenisation, positional tables, masking and Transformer stacks."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor


@dataclass
class StackConfig:
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 8

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.heads <= 0 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class TokenGrid:
    tokens: Tensor
    grid: tuple[int, int]
    coords: np.ndarray = field(default=None)
    visible: np.ndarray = field(default=None)

    def __post_init__(self):
        gh, gw = self.grid
        t = gh * gw
        if self.coords is None:
            self.coords = grid_coords(gh, gw)
        if self.visible is None:
            self.visible = np.ones(t, dtype=bool)
        if self.tokens.shape[-2] != t:
            raise ValueError(f"token count {self.tokens.shape[-2]} != grid {gh}x{gw}")

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class MaskPlan:
    mask_ratio: float
    masked_indices: np.ndarray
    num_tokens: int
    seed: int | None = None

    @property
    def visible_indices(self) -> np.ndarray:
        keep = np.ones(self.num_tokens, dtype=bool)
        keep[self.masked_indices] = False
        return np.flatnonzero(keep)

    @property
    def masked_flags(self) -> np.ndarray:
        flags = np.zeros(self.num_tokens, dtype=bool)
        flags[self.masked_indices] = True
        return flags


def grid_coords(gh: int, gw: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return np.stack([rows, cols], axis=1)


# ----------------------------------------------------------------------
# pixels <-> tokens


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[..., C, H, W] -> [..., T, C*p*p], grid in row-major order."""
    *lead, c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(*lead, c, gh, p, gw, p)
    n = len(lead)
    x = np.transpose(x, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return x.reshape(*lead, gh * gw, c * p * p)


def unpatchify(tokens: np.ndarray, grid: tuple[int, int], channels: int, patch_size: int) -> np.ndarray:
    *lead, t, _ = tokens.shape
    gh, gw = grid
    p = patch_size
    x = tokens.reshape(*lead, gh, gw, channels, p, p)
    n = len(lead)
    x = np.transpose(x, (*range(n), n + 2, n, n + 3, n + 1, n + 4))
    return x.reshape(*lead, channels, gh * p, gw * p)


def image_to_grid(image: np.ndarray, patch_size: int) -> TokenGrid:
    c, h, w = image.shape
    tokens = patchify(image, patch_size)
    return TokenGrid(Tensor(tokens), (h // patch_size, w // patch_size))


def sincos_pos_table(gh: int, gw: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine-cosine table [gh*gw, dim]: half the channels encode row, half column."""
    if dim % 4:
        raise ValueError(f"positional dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    coords = grid_coords(gh, gw).astype(np.float64)

    def encode(pos):
        ang = np.outer(pos, omega)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([encode(coords[:, 0]), encode(coords[:, 1])], axis=1).astype(dtype)


# ----------------------------------------------------------------------
# masking


def sample_mask(num_tokens: int, mask_ratio: float, seed=None) -> MaskPlan:
    """Uniform masking without replacement of ``floor(ratio * T)`` tokens.

    ``seed`` may be an int or a ``np.random.Generator``.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    n_mask = int(math.floor(mask_ratio * num_tokens + 1e-9))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masked = np.sort(rng.permutation(num_tokens)[:n_mask])
    return MaskPlan(mask_ratio, masked, num_tokens, seed if isinstance(seed, (int, np.integer)) else None)


# ----------------------------------------------------------------------
# attention bookkeeping

_COUNTERS: list[list[int]] = []


@contextlib.contextmanager
def count_attention():
    """Collect score-matrix entry counts (per head) for every attention call."""
    rec: list[int] = []
    _COUNTERS.append(rec)
    try:
        yield rec
    finally:
        _COUNTERS.remove(rec)


def _record_scores(seq_shape: tuple[int, ...], n: int) -> None:
    if _COUNTERS:
        entries = int(np.prod(seq_shape, dtype=np.int64)) * n * n
        for rec in _COUNTERS:
            rec.append(entries)


# ----------------------------------------------------------------------
# layers


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        dh = d // h
        _record_scores(tuple(lead), n)

        def split(t):
            return t.reshape(*lead, n, h, dh).transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        out = attn @ v
        nl = len(lead)
        out = out.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, d)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Stack(Module):
    """``depth`` Transformer blocks applied in sequence; depth 0 is the identity."""

    def __init__(self, cfg: StackConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.blocks = []
        for i in range(cfg.depth):
            blk = TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, rng, dtype)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def __call__(self, x: Tensor, taps: tuple[int, ...] = ()) -> Tensor | tuple[Tensor, list[Tensor]]:
        """Run the stack; with ``taps`` also return outputs after those 1-based blocks."""
        tapped = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in taps:
                tapped.append(x)
        if taps:
            return x, tapped
        return x


class PatchEmbed(Module):
    """Linear patch projection plus the fixed sine-cosine position table."""

    def __init__(self, in_features: int, dim: int, grid: tuple[int, int], rng: np.random.Generator,
                 dtype=np.float32):
        self.grid = tuple(grid)
        self.proj = Linear(in_features, dim, rng, dtype)
        self.pos_table = sincos_pos_table(grid[0], grid[1], dim, dtype)

    def __call__(self, pixels: Tensor) -> Tensor:
        """[..., T, C*p*p] pixel tokens -> [..., T, D] embedded tokens (grid order)."""
        return self.proj(pixels) + Tensor(self.pos_table)


def embed(grid: TokenGrid, embedder: PatchEmbed) -> TokenGrid:
    return TokenGrid(embedder(grid.tokens), grid.grid, grid.coords, grid.visible.copy())


def encode_visible(grid: TokenGrid, plan: MaskPlan, stack: Stack) -> Tensor:
    """Run ``stack`` over the visible tokens only, in ascending index order."""
    if plan.num_tokens != grid.num_tokens:
        raise ValueError(f"mask plan covers {plan.num_tokens} tokens, grid has {grid.num_tokens}")
    vis = plan.visible_indices
    grid.visible = np.zeros(grid.num_tokens, dtype=bool)
    grid.visible[vis] = True
    return stack(T.gather(grid.tokens, vis, axis=-2))
