"""Attention-cost benchmark: global vs windowed decode paths.

Counts are exact (instrumented score-matrix entries); timings are medians
after warmup with BLAS pinned to one thread.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .mve import DEFAULT_WINDOW_COUNTS, WindowPlan, attention_pair_count, sample_window_plan
from .tensor import Tensor
from .vit import Stack, StackConfig, count_attention


@dataclass
class GridResult:
    grid: tuple[int, int]
    global_pairs: int
    windowed_pairs: int
    counted_global: int
    counted_windowed: int
    global_seconds: float
    windowed_seconds: float

    @property
    def pair_ratio(self) -> float:
        return self.global_pairs / self.windowed_pairs

    @property
    def time_ratio(self) -> float:
        return self.global_seconds / self.windowed_seconds if self.windowed_seconds else float("inf")


@dataclass
class BenchReport:
    config: dict
    results: list[GridResult] = field(default_factory=list)

    def to_json(self) -> str:
        rows = []
        for r in self.results:
            d = asdict(r)
            d["pair_ratio"] = r.pair_ratio
            d["time_ratio"] = r.time_ratio
            rows.append(d)
        return json.dumps({"config": self.config, "results": rows}, indent=2)

    def table(self) -> str:
        head = f"{'grid':>7} {'global pairs':>13} {'window pairs':>13} {'ratio':>7} {'global s':>10} {'window s':>10} {'speedup':>8}"
        lines = [head, "-" * len(head)]
        for r in self.results:
            g = f"{r.grid[0]}x{r.grid[1]}"
            lines.append(f"{g:>7} {r.global_pairs:>13,} {r.windowed_pairs:>13,} {r.pair_ratio:>7.2f} "
                         f"{r.global_seconds:>10.5f} {r.windowed_seconds:>10.5f} {r.time_ratio:>8.2f}")
        return "\n".join(lines)


def window_batches(tokens: np.ndarray, plan: WindowPlan) -> list[np.ndarray]:
    """Group a [T, D] grid into per-size [count, l*l, D] window stacks."""
    return [tokens[idx] for idx in plan.indices_by_size().values()]


def decode_global(stack: Stack, tokens: np.ndarray) -> Tensor:
    return stack(Tensor(tokens[None]))


def decode_windowed(stack: Stack, windows: list[np.ndarray]) -> list[Tensor]:
    return [stack(Tensor(w)) for w in windows]


def _median_time(fn, trials: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_bench(grid_sizes=(14, 28), window_counts=DEFAULT_WINDOW_COUNTS, trials: int = 20, warmup: int = 3,
              dim: int = 64, depth: int = 1, heads: int = 4, seed: int = 0, plan: WindowPlan | None = None,
              threads: int = 1) -> BenchReport:
    """Time a decoder-only forward over the full grid and over a window plan for each grid size.

    ``plan`` overrides sampling (it must fit every grid).
    """
    rng = np.random.default_rng(seed)
    stack = Stack(StackConfig(depth=depth, dim=dim, heads=heads), rng)
    cfg = {"grid_sizes": list(grid_sizes), "window_counts": {int(k): int(v) for k, v in dict(window_counts).items()},
           "trials": trials, "warmup": warmup, "dim": dim, "depth": depth, "heads": heads, "seed": seed,
           "threads": threads}
    report = BenchReport(cfg)
    with threadpool_limits(limits=threads), T.no_grad():
        for g in grid_sizes:
            grid = (g, g) if isinstance(g, int) else tuple(g)
            wp = plan if plan is not None else sample_window_plan(grid, window_counts, seed)
            if plan is not None:
                wp = WindowPlan.from_triples(plan.to_triples(), grid)
            tokens = rng.standard_normal((grid[0] * grid[1], dim)).astype(np.float32)
            windows = window_batches(tokens, wp)
            with count_attention() as rec:
                decode_global(stack, tokens)
            counted_global = sum(rec) // max(depth, 1) if depth else 0
            with count_attention() as rec:
                decode_windowed(stack, windows)
            counted_windowed = sum(rec) // max(depth, 1) if depth else 0
            tg = _median_time(lambda: decode_global(stack, tokens), trials, warmup)
            tw = _median_time(lambda: decode_windowed(stack, windows), trials, warmup)
            report.results.append(GridResult(grid, attention_pair_count(grid=grid), attention_pair_count(wp),
                                             counted_global, counted_windowed, tg, tw))
    return report
