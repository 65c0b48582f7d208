"""Segmentation finetuning: encoder taps, pyramid fusion, cross-entropy, mIoU."""
from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import tensor as T
from .nn import AdamW, Linear, Module
from .pretrain import lr_at
from .synth import CLASS_NAMES
from .tensor import Tensor
from .vit import PatchEmbed, Stack, patchify

PYRAMID_DIVISORS = (4, 8, 16, 32)


@dataclass
class TapSpec:
    blocks: list[int]
    divisors: list[int] = field(default_factory=lambda: list(PYRAMID_DIVISORS))

    def __post_init__(self):
        if len(self.blocks) != len(self.divisors):
            raise ValueError(f"{len(self.blocks)} taps but {len(self.divisors)} divisors")

    @classmethod
    def for_depth(cls, depth: int) -> "TapSpec":
        """Taps at depth * {1/4, 1/2, 3/4, 1}, rounded up."""
        return cls([max(1, math.ceil(depth * q / 4)) for q in (1, 2, 3, 4)])


@dataclass
class SegPrediction:
    logits: Tensor  # [B, K, H, W]

    def labels(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float32) -> np.ndarray:
    """[n_out, n_in] half-pixel-centred linear interpolation weights."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - w1
    m[np.arange(n_out), i1] += w1
    return m.astype(dtype)


def space_to_depth(x: Tensor, f: int) -> Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // f, f, w // f, f, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h // f, w // f, f * f * c)


class Lateral(Module):
    """Resample one tapped map to its pyramid scale and project to ``out_dim``.

    Downsampling is a stride-``f`` patch projection (kernel = stride);
    upsampling is projection followed by nearest-neighbour repetition.
    """

    def __init__(self, dim: int, out_dim: int, grid_scale: int, divisor: int, rng, dtype=np.float32):
        if divisor >= grid_scale:
            if divisor % grid_scale:
                raise ValueError(f"pyramid divisor {divisor} not a multiple of patch size {grid_scale}")
            self.down = divisor // grid_scale
            self.up = 1
        else:
            if grid_scale % divisor:
                raise ValueError(f"patch size {grid_scale} not a multiple of pyramid divisor {divisor}")
            self.down = 1
            self.up = grid_scale // divisor
        self.proj = Linear(dim * self.down * self.down, out_dim, rng, dtype)

    def __call__(self, fmap: Tensor) -> Tensor:
        if self.down > 1:
            fmap = space_to_depth(fmap, self.down)
        out = self.proj(fmap)
        if self.up > 1:
            out = T.repeat_nearest(out, self.up, axes=(1, 2))
        return out


class SegModel(Module):
    def __init__(self, mcfg: C.ModelConfig, fcfg: C.FinetuneConfig, rng_encoder, rng_head, dtype=np.float32):
        enc = mcfg.encoder
        self.grid = mcfg.grid
        self.patch_size = mcfg.patch_size
        self.image_size = mcfg.image_size
        self.embed = PatchEmbed(mcfg.patch_features, enc.dim, self.grid, rng_encoder, dtype)
        self.encoder = Stack(enc, rng_encoder, dtype)
        taps = TapSpec(list(fcfg.taps)) if fcfg.taps else TapSpec.for_depth(enc.depth)
        for b in taps.blocks:
            if not 1 <= b <= enc.depth:
                raise ValueError(f"tap index {b} outside encoder depth {enc.depth}")
        self.taps = taps
        self.laterals = []
        for i, d in enumerate(taps.divisors):
            if self.image_size % d:
                raise ValueError(f"image size {self.image_size} not divisible by pyramid divisor {d}")
            lat = Lateral(enc.dim, fcfg.fpn_dim, self.patch_size, d, rng_head, dtype)
            setattr(self, f"lateral{i}", lat)
            self.laterals.append(lat)
        self.classifier = Linear(fcfg.fpn_dim, fcfg.num_classes, rng_head, dtype)
        finest = min(taps.divisors)
        side = self.image_size // finest
        self.up_rows = bilinear_matrix(self.image_size, side, dtype)
        self.up_cols = bilinear_matrix(self.image_size, side, dtype).T.copy()

    def encoder_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith(("embed.", "encoder."))}


def tap_features(model: SegModel, images: np.ndarray) -> list[Tensor]:
    """Encoder activations after each tapped block, as [B, gh, gw, D] maps (no masking)."""
    if images.ndim == 3:
        images = images[None]
    b = images.shape[0]
    gh, gw = model.grid
    x = model.embed(Tensor(patchify(images, model.patch_size)))
    outs = [x]
    for blk in model.encoder.blocks:
        x = blk(x)
        outs.append(x)
    return [outs[t].reshape(b, gh, gw, -1) for t in model.taps.blocks]


def pyramid_fuse(model: SegModel, maps: list[Tensor]) -> Tensor:
    """Lateral projection per level, top-down additive fusion, merge at the finest scale."""
    if not maps:
        raise ValueError("need at least one feature map")
    levels = [lat(m) for lat, m in zip(model.laterals, maps)]
    divs = list(model.taps.divisors[:len(levels)])
    order = sorted(range(len(levels)), key=lambda i: divs[i])  # fine -> coarse
    fused = {}
    top = None
    for i in reversed(order):
        cur = levels[i]
        if top is not None:
            cur = cur + T.repeat_nearest(top[0], top[1] // divs[i], axes=(1, 2))
        fused[i] = cur
        top = (cur, divs[i])
    finest = divs[order[0]]
    merged = None
    for i in order:
        f = divs[i] // finest
        lvl = fused[i] if f == 1 else T.repeat_nearest(fused[i], f, axes=(1, 2))
        merged = lvl if merged is None else merged + lvl
    return merged


def segment(model: SegModel, images: np.ndarray) -> SegPrediction:
    """Tap -> fuse -> per-pixel classifier -> bilinear upsample to full resolution."""
    maps = tap_features(model, images)
    fused = T.gelu(pyramid_fuse(model, maps))
    logits = model.classifier(fused).transpose(0, 3, 1, 2)  # [B, K, h, w]
    logits = Tensor(model.up_rows) @ logits @ Tensor(model.up_cols)
    return SegPrediction(logits)


def seg_loss(pred: SegPrediction, labels: np.ndarray) -> Tensor:
    k = pred.logits.shape[1]
    flat = pred.logits.transpose(0, 2, 3, 1).reshape(-1, k)
    return T.cross_entropy(flat, labels.reshape(-1))


# ----------------------------------------------------------------------
# metric


@dataclass
class MiouResult:
    ious: list  # per class; None where the class is absent from both
    mean: float
    intersection: np.ndarray
    union: np.ndarray


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> MiouResult:
    """Per-class IoU and their mean over classes present in ``gt`` or ``pred``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    conf = np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(np.int64)
    union = conf.sum(0) + conf.sum(1) - inter
    exact = [Fraction(int(inter[i]), int(union[i])) for i in range(num_classes) if union[i]]
    ious = [float(Fraction(int(inter[i]), int(union[i]))) if union[i] else None for i in range(num_classes)]
    # exact rational mean so e.g. (1/2 + 2/3) / 2 is the float nearest 7/12
    mean = float(sum(exact) / len(exact)) if exact else float("nan")
    return MiouResult(ious, mean, inter, union)


def write_report(path, result: MiouResult, class_names=CLASS_NAMES) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_name", "iou"])
        for name, v in zip(class_names, result.ious):
            w.writerow([name, "" if v is None else f"{v:.6f}"])
        w.writerow(["mean", f"{result.mean:.6f}"])


PALETTE = [(0, 0, 0), (40, 90, 230), (160, 60, 200), (40, 190, 80)]


def export_png(path, labels: np.ndarray) -> None:
    from PIL import Image

    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    flat = [c for rgb in PALETTE for c in rgb]
    img.putpalette(flat + [0] * (768 - len(flat)))
    img.save(path)


# ----------------------------------------------------------------------
# finetuning


def build_seg_model(cfg: C.RunConfig) -> SegModel:
    return SegModel(cfg.model, cfg.finetune, C.substream(cfg.seed, "init.encoder"),
                    C.substream(cfg.seed, "init.head"), C.np_dtype(cfg))


def load_encoder(model: SegModel, state: dict[str, np.ndarray]) -> None:
    """Copy ``embed.*`` / ``encoder.*`` weights; raises listing every shape difference."""
    own = model.encoder_state()
    enc = {k: v for k, v in state.items() if k.startswith(("embed.", "encoder."))}
    diffs = [f"{k}: missing in checkpoint" for k in own if k not in enc]
    diffs += [f"{k}: unexpected in checkpoint" for k in enc if k not in own]
    diffs += [f"{k}: checkpoint {enc[k].shape} vs model {own[k].shape}" for k in own
              if k in enc and enc[k].shape != own[k].shape]
    if diffs:
        raise C.ConfigError([f"checkpoint/config mismatch: {d}" for d in diffs])
    model.load_state_dict(enc, strict=False)


def encoder_state_from_checkpoint(path) -> dict[str, np.ndarray]:
    arrays, meta = ckpt.load(path)
    prefix = "student" if meta.get("kind") == "pretrain" else "model"
    return {k: v for k, v in ckpt.strip_prefix(arrays, prefix).items() if k.startswith(("embed.", "encoder."))}


def predict(model: SegModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(segment(model, images[i:i + batch_size]).labels())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[-2:], dtype=np.int64)


def evaluate(model: SegModel, images: np.ndarray, labels: np.ndarray, num_classes: int) -> MiouResult:
    return miou(predict(model, images), labels, num_classes)


@dataclass
class FinetuneResult:
    model: SegModel
    history: list[dict]
    final: MiouResult | None = None


def save_seg_checkpoint(path, cfg: C.RunConfig, model: SegModel, epoch: int) -> None:
    ckpt.save(path, ckpt.with_prefix(model.state_dict(), "model"),
              {"kind": "finetune", "config": C.dumps(cfg, with_location=False), "epoch": epoch})


def load_seg_checkpoint(path) -> tuple[SegModel, C.RunConfig]:
    arrays, meta = ckpt.load(path)
    cfg = C.parse(meta["config"])
    model = build_seg_model(cfg)
    model.load_state_dict(ckpt.strip_prefix(arrays, "model"))
    return model, cfg


def finetune_loop(cfg: C.RunConfig, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None,
                  encoder_state: dict[str, np.ndarray] | None = None, out_dir=None,
                  eval_every: int = 1) -> FinetuneResult:
    """Full finetuning of encoder + head with cross-entropy; mIoU on ``val`` per epoch."""
    fc = cfg.finetune
    model = build_seg_model(cfg)
    if encoder_state is not None:
        load_encoder(model, encoder_state)
    opt = AdamW(model.named_parameters(), lr=fc.lr, betas=(cfg.schedule.beta1, 0.999), weight_decay=fc.weight_decay)
    images, labels = train
    n = images.shape[0]
    bs = min(fc.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * fc.epochs
    warm = steps_per_epoch * fc.warmup_epochs
    out_path = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        writer = ckpt.JsonlWriter(out_path / "finetune_metrics.jsonl")
    history = []
    step = 0
    try:
        for epoch in range(fc.epochs):
            order = C.substream(cfg.seed, "ft.data", epoch).permutation(n)
            losses = []
            for s in range(steps_per_epoch):
                idx = order[s * bs:(s + 1) * bs]
                pred = segment(model, images[idx])
                loss = seg_loss(pred, labels[idx])
                lr = lr_at(step, total, warm, fc.lr)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                losses.append(float(loss.data))
                step += 1
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
            if val is not None and ((epoch + 1) % eval_every == 0 or epoch == fc.epochs - 1):
                res = evaluate(model, val[0], val[1], fc.num_classes)
                row["miou"] = res.mean
                row["ious"] = res.ious
            history.append(row)
            if writer:
                writer.write(row)
    finally:
        if writer:
            writer.close()
    result = FinetuneResult(model, history)
    if val is not None:
        result.final = evaluate(model, val[0], val[1], fc.num_classes)
    if out_path is not None:
        save_seg_checkpoint(out_path / "ckpt_finetuned.bin", cfg, model, fc.epochs)
        if result.final is not None:
            write_report(out_path / "eval_report.csv", result.final)
    return result
