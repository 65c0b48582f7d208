"""Run configuration: nested dataclasses, flat key-value files, env overrides.

File format, one entry per line::

    # comment
    model.encoder.depth = 4
    schedule.lr = 1e-3
    model.window_counts = 3:4,4:2,5:1

Environment variables ``EMLR_<SECTION>__<FIELD>`` override file values,
e.g. ``EMLR_SCHEDULE__LR=5e-4``.
"""
from __future__ import annotations

import dataclasses
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vit import StackConfig

ENV_PREFIX = "EMLR_"
MODES = ("pretrain", "finetune", "eval", "bench", "gen-data", "sweep")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists field-level messages."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ModelConfig:
    image_size: int = 64
    in_chans: int = 1
    patch_size: int = 8
    encoder: StackConfig = field(default_factory=lambda: StackConfig(depth=4, dim=64, heads=4))
    decoder: StackConfig = field(default_factory=lambda: StackConfig(depth=2, dim=64, heads=4))
    mask_ratio: float = 0.6
    window_counts: dict = field(default_factory=lambda: {3: 4, 4: 2, 5: 1})
    loss: str = "smooth_l1"
    smooth_l1_beta: float = 1.0

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def patch_features(self) -> int:
        return self.in_chans * self.patch_size * self.patch_size


@dataclass
class TrainSchedule:
    total_epochs: int = 30
    breakpoints: list = field(default_factory=lambda: [8])
    warmup_epochs: int = 4
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 32
    max_steps: int = 0

    @property
    def breakpoint_epoch(self) -> int:
        return self.breakpoints[0]


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    base_seed: int = 1000
    image_size: int = 64
    data_dir: str = ""


@dataclass
class FinetuneConfig:
    epochs: int = 40
    warmup_epochs: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 16
    n_train: int = 200
    num_classes: int = 4
    taps: list = field(default_factory=list)
    fpn_dim: int = 64
    checkpoint: str = ""


@dataclass
class BenchConfig:
    grid_sizes: list = field(default_factory=lambda: [14, 28])
    trials: int = 20
    warmup: int = 3
    dim: int = 64
    depth: int = 1
    heads: int = 4
    window_counts: dict = field(default_factory=lambda: {5: 4, 7: 2, 9: 1})


@dataclass
class RunConfig:
    mode: str = "pretrain"
    seed: int = 0
    out_dir: str = "runs/default"
    dtype: str = "float32"
    debug: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


def full_config() -> RunConfig:
    """The full-size geometry (224 px, patch 16, ViT-L depth) for reference; not trainable here."""
    cfg = RunConfig()
    cfg.model = ModelConfig(image_size=224, in_chans=1, patch_size=16,
                            encoder=StackConfig(depth=24, dim=1024, heads=16, patch_size=16),
                            decoder=StackConfig(depth=4, dim=512, heads=16, patch_size=16),
                            window_counts={5: 4, 7: 2, 9: 1})
    cfg.data.image_size = 224
    cfg.schedule = TrainSchedule(total_epochs=300, breakpoints=[80], warmup_epochs=40)
    cfg.finetune = FinetuneConfig(epochs=40, warmup_epochs=5)
    return cfg


# ----------------------------------------------------------------------
# flat <-> nested


def flatten(obj, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            out.update(flatten(val, key + "."))
        else:
            out[key] = val
    return out


def format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, dict):
        return ",".join(f"{k}:{v}" for k, v in val.items())
    if isinstance(val, (list, tuple)):
        return ",".join(str(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


LOCATION_KEYS = ("out_dir",)


def dumps(cfg: RunConfig, with_location: bool = True) -> str:
    """Flat ``key = value`` text; ``with_location=False`` drops where the run writes,
    so the text embedded in checkpoints is independent of the run directory."""
    items = flatten(cfg).items()
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items if with_location or k not in LOCATION_KEYS)


def _parse_scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(text: str, current):
    if isinstance(current, bool):
        return _parse_scalar(text, bool)
    if isinstance(current, int):
        return _parse_scalar(text, int)
    if isinstance(current, float):
        return _parse_scalar(text, float)
    if isinstance(current, dict):
        out = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            k, _, v = part.partition(":")
            if not _:
                raise ValueError(f"expected size:count pairs, got {part!r}")
            out[int(k)] = int(v)
        return out
    if isinstance(current, list):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return [int(p) if p.lstrip("-").isdigit() else float(p) for p in parts]
    return text.strip()


def set_key(cfg: RunConfig, key: str, text: str) -> None:
    parts = key.strip().split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise KeyError(key)
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise KeyError(key)
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise KeyError(key)
    setattr(obj, leaf, _parse_value(text, current))


def parse(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    errors = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        try:
            set_key(cfg, key, value)
        except KeyError:
            errors.append(f"line {lineno}: unknown key {key.strip()!r}")
        except ValueError as exc:
            errors.append(f"{key.strip()}: {exc}")
    if errors:
        raise ConfigError(errors)
    _refresh(cfg)
    return cfg


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    errors = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        try:
            set_key(cfg, key, value)
        except KeyError:
            errors.append(f"{name}: unknown key {key!r}")
        except ValueError as exc:
            errors.append(f"{name}: {exc}")
    if errors:
        raise ConfigError(errors)
    _refresh(cfg)
    return cfg


def _refresh(cfg: RunConfig) -> None:
    # keep derived stack fields coherent with the model geometry
    cfg.model.encoder.patch_size = cfg.model.patch_size
    cfg.model.decoder.patch_size = cfg.model.patch_size


def load(path: str | os.PathLike | None = None, environ=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse(Path(path).read_text(), cfg)
    return apply_env(cfg, environ)


def validate(cfg: RunConfig) -> RunConfig:
    errs = []
    m, s = cfg.model, cfg.schedule
    if cfg.mode not in MODES:
        errs.append(f"mode: must be one of {MODES}, got {cfg.mode!r}")
    if not 0.0 <= m.mask_ratio < 1.0:
        errs.append(f"model.mask_ratio: must lie in [0, 1), got {m.mask_ratio}")
    if m.patch_size <= 0 or m.image_size % m.patch_size:
        errs.append(f"model.image_size: {m.image_size} not divisible by patch_size {m.patch_size}")
    else:
        g = min(m.grid)
        for size in m.window_counts:
            if size > g or size < 1:
                errs.append(f"model.window_counts: window size {size} exceeds grid {g}x{g}")
    for name, st in (("model.encoder", m.encoder), ("model.decoder", m.decoder)):
        if st.heads <= 0 or st.dim % st.heads:
            errs.append(f"{name}.dim: {st.dim} not divisible by heads {st.heads}")
        if st.depth < 0:
            errs.append(f"{name}.depth: must be >= 0")
    if m.encoder.dim % 4:
        errs.append(f"model.encoder.dim: must be divisible by 4 for the 2-D sine-cosine table")
    if cfg.data.image_size != m.image_size:
        errs.append(f"data.image_size: {cfg.data.image_size} differs from model.image_size {m.image_size}")
    if m.loss not in ("smooth_l1", "l1"):
        errs.append(f"model.loss: must be smooth_l1 or l1, got {m.loss!r}")
    if not s.breakpoints:
        errs.append("schedule.breakpoints: need at least one breakpoint")
    for bp in s.breakpoints:
        if not 0 < bp < s.total_epochs:
            errs.append(f"schedule.breakpoints: {bp} not in (0, {s.total_epochs})")
    if s.batch_size <= 0:
        errs.append("schedule.batch_size: must be positive")
    for t in cfg.finetune.taps:
        if not 1 <= t <= m.encoder.depth:
            errs.append(f"finetune.taps: tap index {t} outside 1..{m.encoder.depth}")
    for size in cfg.bench.window_counts:
        if size > min(cfg.bench.grid_sizes or [size]):
            errs.append(f"bench.window_counts: window size {size} exceeds smallest bench grid")
    if cfg.dtype not in ("float32", "float64"):
        errs.append(f"dtype: must be float32 or float64, got {cfg.dtype!r}")
    if errs:
        raise ConfigError(errs)
    return cfg


# ----------------------------------------------------------------------
# seeded substreams


def substream(master_seed: int, name: str, *counters: int) -> np.random.Generator:
    """Independent generator for a named purpose (data, mask, window, init, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), zlib.crc32(name.encode()), *map(int, counters)]))


def substream_seed(master_seed: int, name: str, *counters: int) -> int:
    return int(substream(master_seed, name, *counters).integers(0, 2**31 - 1))


def np_dtype(cfg: RunConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32

