"""Multi-scale local visual field extraction.

The student's encoded visible tokens and mask tokens are laid back out in
grid order, square windows of several sizes are cut from that grid, and the
window positions are recorded so the teacher can cut the identical fields
from the complete image.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vit import MaskPlan

DEFAULT_WINDOW_COUNTS = OrderedDict([(5, 4), (7, 2), (9, 1)])


@dataclass(frozen=True)
class WindowSpec:
    size: int
    top_left: tuple[int, int]
    grid: tuple[int, int]

    def __post_init__(self):
        r, c = self.top_left
        gh, gw = self.grid
        if self.size < 1 or r < 0 or c < 0 or r + self.size > gh or c + self.size > gw:
            raise ValueError(f"window {self.size}x{self.size} at {self.top_left} does not fit grid {gh}x{gw}")

    @property
    def token_indices(self) -> np.ndarray:
        r, c = self.top_left
        rows = np.arange(r, r + self.size)
        cols = np.arange(c, c + self.size)
        return (rows[:, None] * self.grid[1] + cols[None, :]).reshape(-1)

    @property
    def coords(self) -> list[tuple[int, int]]:
        r, c = self.top_left
        return [(r + i, c + j) for i in range(self.size) for j in range(self.size)]


@dataclass
class WindowPlan:
    specs: list[WindowSpec]
    grid: tuple[int, int]
    seed: int | None = None
    counts_by_size: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts_by_size:
            counts: dict[int, int] = {}
            for s in self.specs:
                counts[s.size] = counts.get(s.size, 0) + 1
            self.counts_by_size = counts

    def __len__(self) -> int:
        return len(self.specs)

    def to_triples(self) -> list[tuple[int, int, int]]:
        return [(s.size, s.top_left[0], s.top_left[1]) for s in self.specs]

    @classmethod
    def from_triples(cls, triples, grid, seed=None) -> "WindowPlan":
        grid = tuple(grid)
        return cls([WindowSpec(int(sz), (int(r), int(c)), grid) for sz, r, c in triples], grid, seed)

    def indices_by_size(self) -> "OrderedDict[int, np.ndarray]":
        """size -> [count, size*size] grid indices, in plan order."""
        out: OrderedDict[int, list[np.ndarray]] = OrderedDict()
        for s in self.specs:
            out.setdefault(s.size, []).append(s.token_indices)
        return OrderedDict((k, np.stack(v)) for k, v in out.items())


@dataclass
class LocalFieldBatch:
    tokens: list[Tensor]
    masked: list[np.ndarray]
    plan: WindowPlan

    @property
    def coords(self) -> list[list[tuple[int, int]]]:
        return [s.coords for s in self.plan.specs]


def _normalise_counts(counts_by_size) -> "OrderedDict[int, int]":
    items = counts_by_size.items() if isinstance(counts_by_size, dict) else counts_by_size
    return OrderedDict(sorted((int(k), int(v)) for k, v in items))


def sample_window_plan(grid: tuple[int, int], counts_by_size=DEFAULT_WINDOW_COUNTS, seed=None) -> WindowPlan:
    """Place each requested window independently and uniformly over valid top-left positions."""
    gh, gw = grid
    counts = _normalise_counts(counts_by_size)
    for size in counts:
        if size > min(gh, gw) or size < 1:
            raise ValueError(f"window size {size} does not fit grid {gh}x{gw}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    specs = []
    for size, count in counts.items():
        for _ in range(count):
            r = int(rng.integers(0, gh - size + 1))
            c = int(rng.integers(0, gw - size + 1))
            specs.append(WindowSpec(size, (r, c), (gh, gw)))
    return WindowPlan(specs, (gh, gw), seed if isinstance(seed, (int, np.integer)) else None, dict(counts))


def assemble_full_grid(encoded_visible: Tensor, plan: MaskPlan | list[MaskPlan], mask_token: Tensor,
                       pos_table: np.ndarray) -> Tensor:
    """Lay encoded visible tokens and positioned mask tokens back out in grid order.

    Works on a single image ([V, D] with one plan) or a batch ([B, V, D] with
    one plan per image; all plans must mask the same number of tokens).
    """
    plans = [plan] if isinstance(plan, MaskPlan) else list(plan)
    batched = encoded_visible.ndim == 3
    if batched != isinstance(plan, (list, tuple)):
        raise ValueError("pass a list of plans for batched input and a single plan otherwise")
    t = plans[0].num_tokens
    orders = []
    for p in plans:
        vis, msk = p.visible_indices, p.masked_indices
        if p.num_tokens != t or vis.size + msk.size != t:
            raise ValueError(f"visible {vis.size} + masked {msk.size} != {t} tokens")
        order = np.concatenate([vis, msk])
        if np.unique(order).size != t:
            raise ValueError("mask plan index collision")
        orders.append(order)
    v = encoded_visible.shape[-2]
    if any(p.visible_indices.size != v for p in plans):
        raise ValueError(f"encoded visible count {v} does not match mask plan")
    masked = np.stack([p.masked_indices for p in plans])
    pos = pos_table[masked]
    if not batched:
        pos = pos[0]
    mask_part = mask_token + Tensor(pos.astype(encoded_visible.dtype, copy=False))
    combined = T.concat([encoded_visible, mask_part], axis=-2)
    inverse = np.stack([np.argsort(o, kind="stable") for o in orders])
    if not batched:
        return T.gather(combined, inverse[0], axis=0)
    return T.gather(combined, inverse, axis=1)


def extract(full_grid: Tensor, plan: WindowPlan, mask_plan: MaskPlan | None = None) -> LocalFieldBatch:
    """Gather each window's tokens (row-major inside the window) and masked flags."""
    t = full_grid.shape[-2]
    if plan.grid[0] * plan.grid[1] != t:
        raise ValueError(f"window plan grid {plan.grid} does not match {t} tokens")
    flags = mask_plan.masked_flags if mask_plan is not None else np.zeros(t, dtype=bool)
    tokens, masked = [], []
    for spec in plan.specs:
        idx = spec.token_indices
        tokens.append(T.gather(full_grid, idx, axis=-2))
        masked.append(flags[idx])
    return LocalFieldBatch(tokens, masked, plan)


def scatter_back(fields: LocalFieldBatch, num_tokens: int) -> np.ndarray:
    """Write window tokens back to a grid (last write wins on overlaps); unseen slots are NaN."""
    d = fields.tokens[0].shape[-1]
    out = np.full((num_tokens, d), np.nan)
    for spec, tok in zip(fields.plan.specs, fields.tokens):
        out[spec.token_indices] = tok.data
    return out


@dataclass
class GroupedFields:
    """Windows of one size stacked over images: tokens [B*count, l*l, D]."""
    size: int
    tokens: Tensor
    masked: np.ndarray
    indices: np.ndarray


def extract_grouped(full_grid: Tensor, plans: list[WindowPlan],
                    mask_plans: list[MaskPlan] | None = None) -> list[GroupedFields]:
    """Batched :func:`extract`: windows of equal size from all images share one tensor.

    ``full_grid`` is [B, T, D]; every plan must request the same sizes and
    counts. Group order follows ascending window size; within a group rows
    are image-major, then plan order.
    """
    b, t, d = full_grid.shape
    if len(plans) != b:
        raise ValueError(f"{len(plans)} window plans for batch of {b}")
    per_image = [p.indices_by_size() for p in plans]
    sizes = list(per_image[0].keys())
    if any(list(pi.keys()) != sizes for pi in per_image):
        raise ValueError("window plans in a batch must share sizes")
    groups = []
    for size in sizes:
        idx = np.stack([pi[size] for pi in per_image])  # [B, count, l*l]
        count = idx.shape[1]
        gathered = T.gather(full_grid, idx.reshape(b, -1), axis=1)
        tokens = gathered.reshape(b * count, size * size, d)
        if mask_plans is not None:
            flags = np.stack([mp.masked_flags for mp in mask_plans])
            masked = np.take_along_axis(flags, idx.reshape(b, -1), axis=1).reshape(b * count, size * size)
        else:
            masked = np.zeros((b * count, size * size), dtype=bool)
        groups.append(GroupedFields(size, tokens, masked, idx.reshape(b * count, size * size)))
    return groups


def attention_pair_count(plan: WindowPlan | None = None, grid: tuple[int, int] | None = None) -> int:
    """Score-matrix entries per attention layer (per head).

    With ``plan``: sum over windows of (l*l)^2. With only ``grid``: (gh*gw)^2.
    """
    if plan is not None:
        return int(sum((s.size * s.size) ** 2 for s in plan.specs))
    if grid is None:
        raise ValueError("need a window plan or a grid")
    n = grid[0] * grid[1]
    return n * n
