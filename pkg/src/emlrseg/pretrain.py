"""Teacher-guided masked feature reconstruction over local visual fields.

Student: embed -> mask -> encoder over visible tokens -> grid assembly with
mask tokens -> window extraction -> per-window decoder -> projection to the
teacher's feature width.

Teacher: embed all patches -> cut the same windows -> encoder per window.
It is frozen except for one parameter copy from the student at the
breakpoint between the two training stages.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import tensor as T
from .mve import GroupedFields, WindowPlan, assemble_full_grid, extract_grouped, sample_window_plan
from .nn import AdamW, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor
from .vit import MaskPlan, PatchEmbed, Stack, patchify, sample_mask

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss during training."""


class StudentModel(Module):
    def __init__(self, mcfg: C.ModelConfig, rng: np.random.Generator, dtype=np.float32):
        enc, dec = mcfg.encoder, mcfg.decoder
        self.grid = mcfg.grid
        self.patch_size = mcfg.patch_size
        self.embed = PatchEmbed(mcfg.patch_features, enc.dim, self.grid, rng, dtype)
        self.encoder = Stack(enc, rng, dtype)
        self.mask_token = Parameter(trunc_normal(rng, (enc.dim,), dtype=dtype))
        self.decoder_embed = Linear(enc.dim, dec.dim, rng, dtype)
        self.decoder = Stack(dec, rng, dtype)
        self.decoder_norm = LayerNorm(dec.dim, dtype)
        self.head = Linear(dec.dim, enc.dim, rng, dtype)

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith(("embed.", "encoder."))}


class TeacherModel(Module):
    def __init__(self, mcfg: C.ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.grid = mcfg.grid
        self.patch_size = mcfg.patch_size
        self.embed = PatchEmbed(mcfg.patch_features, mcfg.encoder.dim, self.grid, rng, dtype)
        self.encoder = Stack(mcfg.encoder, rng, dtype)
        self.set_trainable(False)


@dataclass
class FieldOutputs:
    """Per-size groups of window features, each [n_windows, l*l, D]."""
    groups: list[GroupedFields]
    grid: tuple[int, int]

    def coords(self) -> list[np.ndarray]:
        return [np.stack(np.divmod(g.indices, self.grid[1]), axis=-1) for g in self.groups]

    def per_window(self) -> list[np.ndarray]:
        return [w for g in self.groups for w in g.tokens.data]


def _pixels(images: np.ndarray, patch_size: int) -> np.ndarray:
    if images.ndim == 3:
        images = images[None]
    return patchify(images, patch_size)


def student_forward(student: StudentModel, pixels: np.ndarray, mask_plans: list[MaskPlan],
                    window_plans: list[WindowPlan]) -> FieldOutputs:
    """Batched student path. ``pixels`` is [B, T, C*p*p] (see :func:`vit.patchify`)."""
    b = pixels.shape[0]
    if len(mask_plans) != b or len(window_plans) != b:
        raise ValueError("need one mask plan and one window plan per image")
    x = student.embed(Tensor(pixels))
    vis = np.stack([mp.visible_indices for mp in mask_plans])
    encoded = student.encoder(T.gather(x, vis, axis=1))
    full = assemble_full_grid(encoded, mask_plans, student.mask_token, student.embed.pos_table)
    groups = extract_grouped(full, window_plans, mask_plans)
    out = []
    for g in groups:
        h = student.decoder_embed(g.tokens)
        h = student.head(student.decoder_norm(student.decoder(h)))
        out.append(GroupedFields(g.size, h, g.masked, g.indices))
    return FieldOutputs(out, student.grid)


def teacher_forward(teacher: TeacherModel, pixels: np.ndarray, window_plans: list[WindowPlan]) -> FieldOutputs:
    """Batched teacher path: every patch embedded, each window encoded on its own."""
    for wp in window_plans:
        if tuple(wp.grid) != tuple(teacher.grid):
            raise ValueError(f"window plan grid {wp.grid} does not match teacher grid {teacher.grid}")
    with T.no_grad():
        x = teacher.embed(Tensor(pixels))
        groups = extract_grouped(x, window_plans)
        out = [GroupedFields(g.size, teacher.encoder(g.tokens), g.masked, g.indices) for g in groups]
    return FieldOutputs(out, teacher.grid)


def student_forward_single(student: StudentModel, image: np.ndarray, mask_plan: MaskPlan,
                           window_plan: WindowPlan) -> list[Tensor]:
    """One image; returns per-window predictions in window-plan order."""
    out = student_forward(student, _pixels(image, student.patch_size), [mask_plan], [window_plan])
    return _split_windows(out, window_plan)


def teacher_forward_single(teacher: TeacherModel, image: np.ndarray, window_plan: WindowPlan) -> list[Tensor]:
    out = teacher_forward(teacher, _pixels(image, teacher.patch_size), [window_plan])
    return _split_windows(out, window_plan)


def _split_windows(out: FieldOutputs, plan: WindowPlan) -> list[Tensor]:
    by_size = {g.size: g for g in out.groups}
    seen: dict[int, int] = {}
    result = []
    for spec in plan.specs:
        i = seen.get(spec.size, 0)
        seen[spec.size] = i + 1
        result.append(by_size[spec.size].tokens[i])
    return result


def reconstruction_loss(pred: FieldOutputs, target: FieldOutputs, beta: float = 1.0, kind: str = "smooth_l1") -> Tensor:
    """SmoothL1 summed over masked positions and channels, divided by the masked-occurrence count."""
    if len(pred.groups) != len(target.groups):
        raise ValueError("student and teacher window structures differ")
    total = None
    count = 0
    for gp, gt in zip(pred.groups, target.groups):
        if gp.tokens.shape != gt.tokens.shape or not np.array_equal(gp.indices, gt.indices):
            raise ValueError(f"window mismatch for size {gp.size}: student and teacher fields differ")
        weight = gp.masked.astype(gp.tokens.dtype)[..., None]
        n = int(gp.masked.sum())
        if n == 0:
            continue
        el = T.smooth_l1(gp.tokens, gt.tokens.detach(), beta) if kind == "smooth_l1" else T.abs_diff(gp.tokens, gt.tokens.detach())
        part = (el * weight).sum()
        total = part if total is None else total + part
        count += n
    if count == 0:
        log.warning("no masked token in any window; reconstruction loss defined as 0")
        dtype = pred.groups[0].tokens.dtype if pred.groups else np.float32
        return Tensor(np.zeros((), dtype=dtype))
    return total * (1.0 / count)


def breakpoint_copy(student: StudentModel, teacher: TeacherModel) -> None:
    """Overwrite teacher embedding and encoder with exact copies of the student's."""
    src = student.encoder_state()
    dst = dict(teacher.named_parameters())
    if set(src) != set(dst):
        raise ValueError(f"architecture mismatch: {sorted(set(src) ^ set(dst))}")
    bad = [f"{k}: {src[k].shape} vs {dst[k].shape}" for k in src if src[k].shape != dst[k].shape]
    if bad:
        raise ValueError("architecture mismatch: " + "; ".join(bad))
    for k, p in dst.items():
        p.data = src[k].copy()
    teacher.embed.pos_table = student.embed.pos_table.copy()
    teacher.set_trainable(False)


# ----------------------------------------------------------------------
# schedule


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup then half-cosine decay to ``min_lr``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    prog = min((step - warmup_steps) / span, 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * prog))


def sample_plans(cfg: C.RunConfig, epoch: int, step: int, batch_index: np.ndarray) -> tuple[list[MaskPlan], list[WindowPlan]]:
    t = cfg.model.grid[0] * cfg.model.grid[1]
    masks, windows = [], []
    for i in batch_index:
        masks.append(sample_mask(t, cfg.model.mask_ratio, C.substream(cfg.seed, "mask", epoch, step, int(i))))
        windows.append(sample_window_plan(cfg.model.grid, cfg.model.window_counts,
                                          C.substream(cfg.seed, "window", epoch, step, int(i))))
    return masks, windows


def build_models(cfg: C.RunConfig) -> tuple[StudentModel, TeacherModel]:
    dtype = C.np_dtype(cfg)
    student = StudentModel(cfg.model, C.substream(cfg.seed, "init.student"), dtype)
    teacher = TeacherModel(cfg.model, C.substream(cfg.seed, "init.teacher"), dtype)
    return student, teacher


def check_position_agreement(s: FieldOutputs, t: FieldOutputs) -> None:
    for cs, ct in zip(s.coords(), t.coords()):
        if not np.array_equal(cs, ct):
            raise AssertionError("student and teacher windows cover different grid positions")


# ----------------------------------------------------------------------
# checkpoints


def save_pretrain_checkpoint(path, cfg: C.RunConfig, student: StudentModel, teacher: TeacherModel,
                             opt: AdamW, epoch: int, step: int) -> None:
    arrays = {}
    arrays.update(ckpt.with_prefix(student.state_dict(), "student"))
    arrays.update(ckpt.with_prefix(teacher.state_dict(), "teacher"))
    for name, m in opt.state.m.items():
        arrays[f"optim.m.{name}"] = m
        arrays[f"optim.v.{name}"] = opt.state.v[name]
    meta = {
        "kind": "pretrain",
        "config": C.dumps(cfg, with_location=False),
        "epoch": epoch,
        "step": step,
        "optim_step": opt.state.step,
        "rng": {"master_seed": cfg.seed, "next_epoch": epoch, "next_step": step},
    }
    ckpt.save(path, arrays, meta)


def load_pretrain_checkpoint(path, cfg: C.RunConfig | None = None):
    arrays, meta = ckpt.load(path)
    if cfg is None:
        cfg = C.parse(meta["config"])
    student, teacher = build_models(cfg)
    student.load_state_dict(ckpt.strip_prefix(arrays, "student"))
    teacher.load_state_dict(ckpt.strip_prefix(arrays, "teacher"))
    teacher.set_trainable(False)
    return student, teacher, meta, arrays


# ----------------------------------------------------------------------
# loop


@dataclass
class StepInfo:
    epoch: int
    step: int
    loss: float
    lr: float
    phase: str
    student: StudentModel
    teacher: TeacherModel
    breakpoint: bool = False


@dataclass
class PretrainResult:
    student: StudentModel
    teacher: TeacherModel
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def epoch_means(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for row in self.metrics:
            if "loss" in row:
                sums.setdefault(row["epoch"], []).append(row["loss"])
        return {e: float(np.mean(v)) for e, v in sorted(sums.items())}


def pretrain_loop(cfg: C.RunConfig, images: np.ndarray, out_dir=None,
                  on_step: Callable[[StepInfo], None] | None = None) -> PretrainResult:
    """Two-stage pretraining over ``images`` [N, C, H, W] (already normalised).

    Writes ``metrics.jsonl`` (deterministic fields only), ``timings.jsonl``
    (wall-clock) and checkpoints at each breakpoint and at the end when
    ``out_dir`` is given.
    """
    C.validate(cfg)
    sched = cfg.schedule
    dtype = C.np_dtype(cfg)
    student, teacher = build_models(cfg)
    opt = AdamW(student.named_parameters(), lr=sched.lr, betas=(sched.beta1, sched.beta2),
                weight_decay=sched.weight_decay)
    n = images.shape[0]
    bs = min(sched.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * sched.total_epochs
    if sched.max_steps:
        total_steps = min(total_steps, sched.max_steps)
    warmup_steps = steps_per_epoch * sched.warmup_epochs
    pixels_all = patchify(images.astype(dtype, copy=False), cfg.model.patch_size)

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_w = timings_w = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_w = ckpt.JsonlWriter(out_path / "metrics.jsonl")
        timings_w = ckpt.JsonlWriter(out_path / "timings.jsonl")
    result = PretrainResult(student, teacher)
    breakpoints = set(sched.breakpoints)
    phase = "stage1"
    global_step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(sched.total_epochs):
            order = C.substream(cfg.seed, "data", epoch).permutation(n)
            for s in range(steps_per_epoch):
                if global_step >= total_steps:
                    break
                idx = order[s * bs:(s + 1) * bs]
                masks, windows = sample_plans(cfg, epoch, global_step, idx)
                pix = pixels_all[idx]
                target = teacher_forward(teacher, pix, windows)
                pred = student_forward(student, pix, masks, windows)
                if cfg.debug:
                    check_position_agreement(pred, target)
                loss = reconstruction_loss(pred, target, cfg.model.smooth_l1_beta,
                                           "smooth_l1" if cfg.model.loss == "smooth_l1" else "l1")
                lval = float(loss.data)
                if not math.isfinite(lval):
                    _dump_failure(out_path, cfg, epoch, global_step, idx)
                    raise NumericalError(f"non-finite loss at epoch {epoch} step {global_step} "
                                         f"(master seed {cfg.seed}, batch indices {idx[:8].tolist()}...)")
                lr = lr_at(global_step, total_steps, warmup_steps, sched.lr, sched.min_lr)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                row = {"step": global_step, "epoch": epoch, "loss": lval, "lr": lr, "phase": phase}
                result.metrics.append(row)
                if metrics_w:
                    metrics_w.write(row)
                    timings_w.write({"step": global_step, "seconds": round(time.perf_counter() - t0, 6)})
                is_bp = False
                last_in_epoch = s == steps_per_epoch - 1 or global_step + 1 >= total_steps
                if last_in_epoch and (epoch + 1) in breakpoints:
                    breakpoint_copy(student, teacher)
                    is_bp = True
                    phase = "stage2"
                    ev = {"event": "breakpoint", "epoch": epoch + 1, "step": global_step}
                    result.metrics.append(ev)
                    if metrics_w:
                        metrics_w.write(ev)
                    if out_path is not None:
                        p = out_path / f"ckpt_breakpoint_e{epoch + 1}.bin"
                        save_pretrain_checkpoint(p, cfg, student, teacher, opt, epoch + 1, global_step + 1)
                        result.checkpoints.append(p)
                if on_step is not None:
                    on_step(StepInfo(epoch, global_step, lval, lr, phase, student, teacher, is_bp))
                global_step += 1
        if out_path is not None:
            p = out_path / "ckpt_final.bin"
            save_pretrain_checkpoint(p, cfg, student, teacher, opt, sched.total_epochs, global_step)
            result.checkpoints.append(p)
    finally:
        if metrics_w:
            metrics_w.close()
            timings_w.close()
    return result


def _dump_failure(out_path, cfg, epoch, step, idx) -> None:
    if out_path is None:
        return
    dump = {"epoch": epoch, "step": step, "master_seed": cfg.seed, "batch_indices": [int(i) for i in idx],
            "mask_seeds": ["mask", epoch, step], "window_seeds": ["window", epoch, step]}
    (out_path / "failure.json").write_text(json.dumps(dump, indent=1))

