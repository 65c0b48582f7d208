"""Command-line entry points.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import synth
from .checkpoint import CheckpointError

log = logging.getLogger("emlrseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_AXES = {
    "mask_ratio": "model.mask_ratio",
    "decoder_depth": "model.decoder.depth",
    "window_counts": "model.window_counts",
    "dataset_size": "data.n_train",
}


class RunDirExists(Exception):
    pass


def prepare_run_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise RunDirExists(f"run directory {path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_echo(run_dir: Path, cfg: C.RunConfig) -> None:
    (run_dir / "config.txt").write_text(C.dumps(cfg))


# ----------------------------------------------------------------------
# data


def _manifest_path(data_dir, split) -> Path:
    return Path(data_dir) / f"manifest_{split}.jsonl"


def load_split(cfg: C.RunConfig, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Raw images [N, 1, H, W] and labels for a split.

    Reads persisted samples when ``data.data_dir`` holds a manifest,
    otherwise regenerates from the seed layout in ``cfg.data``.
    """
    d = cfg.data
    spec = synth.SceneSpec(image_size=d.image_size)
    if d.data_dir:
        mpath = _manifest_path(d.data_dir, split)
        if not mpath.exists():
            raise FileNotFoundError(f"missing manifest {mpath}")
        spec, entries = synth.read_manifest(mpath)
        sample_dir = Path(d.data_dir) / "samples" / split
        if sample_dir.exists():
            samples = [synth.read_sample(sample_dir / f"{e.index:05d}.bin") for e in entries]
            if not samples:
                return synth.generate_arrays([], spec)
            return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])
        return synth.generate_arrays(entries, spec)
    splits = synth.make_split(d.n_train, d.n_val, d.n_test, d.base_seed, spec)
    return synth.generate_arrays(splits[split], spec)


# ----------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: C.RunConfig, args) -> int:
    out = prepare_run_dir(args.out or cfg.out_dir, args.force)
    d = cfg.data
    spec = synth.SceneSpec(image_size=d.image_size)
    splits = synth.make_split(d.n_train, d.n_val, d.n_test, d.base_seed, spec)
    for split, entries in splits.items():
        synth.write_manifest(out / f"manifest_{split}.jsonl", entries, spec)
        sdir = out / "samples" / split
        sdir.mkdir(parents=True, exist_ok=True)
        for e in entries:
            synth.write_sample(sdir / f"{e.index:05d}.bin", synth.regenerate(e, spec))
    cfg.data.data_dir = str(out)
    write_echo(out, cfg)
    print(f"wrote {sum(len(v) for v in splits.values())} samples to {out}")
    return EXIT_OK


def run_pretrain(cfg: C.RunConfig, run_dir: Path):
    from .pretrain import pretrain_loop

    images, _ = load_split(cfg, "train")
    write_echo(run_dir, cfg)
    return pretrain_loop(cfg, synth.normalize(images), run_dir)


def cmd_pretrain(cfg: C.RunConfig, args) -> int:
    run_dir = prepare_run_dir(cfg.out_dir, args.force)
    res = run_pretrain(cfg, run_dir)
    means = res.epoch_means()
    if means:
        first, last = means[min(means)], means[max(means)]
        print(f"pretrain done: first-epoch loss {first:.4f}, final-epoch loss {last:.4f}")
    return EXIT_OK


def _labeled(cfg: C.RunConfig, split: str, limit: int | None = None):
    images, labels = load_split(cfg, split)
    if limit:
        images, labels = images[:limit], labels[:limit]
    return synth.normalize(images), labels.astype(np.int64)


def cmd_finetune(cfg: C.RunConfig, args) -> int:
    from .seg import encoder_state_from_checkpoint, finetune_loop

    run_dir = prepare_run_dir(cfg.out_dir, args.force)
    ckpt_path = args.checkpoint or cfg.finetune.checkpoint
    cfg.finetune.checkpoint = ckpt_path or ""
    state = encoder_state_from_checkpoint(ckpt_path) if ckpt_path else None
    write_echo(run_dir, cfg)
    train = _labeled(cfg, "train", cfg.finetune.n_train)
    val = _labeled(cfg, "val")
    res = finetune_loop(cfg, train, val, state, run_dir)
    if res.final is not None:
        print(f"finetune done: val mIoU {res.final.mean:.4f}")
    return EXIT_OK


def cmd_eval(cfg: C.RunConfig, args) -> int:
    from .seg import evaluate, export_png, load_seg_checkpoint, predict, write_report

    if not args.checkpoint:
        raise C.ConfigError(["--checkpoint: required for eval"])
    model, ckpt_cfg = load_seg_checkpoint(args.checkpoint)
    ckpt_cfg.data = cfg.data if args.config else ckpt_cfg.data
    images, labels = _labeled(ckpt_cfg, args.split)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = evaluate(model, images, labels, ckpt_cfg.finetune.num_classes)
    report = out / f"eval_{args.split}.csv"
    write_report(report, result)
    if args.png:
        png_dir = out / f"pred_{args.split}"
        png_dir.mkdir(exist_ok=True)
        for i, lab in enumerate(predict(model, images)):
            export_png(png_dir / f"{i:05d}.png", lab)
    print(report.read_text(), end="")
    return EXIT_OK


def cmd_bench(cfg: C.RunConfig, args) -> int:
    from .bench import run_bench

    b = cfg.bench
    report = run_bench(b.grid_sizes, b.window_counts, b.trials, b.warmup, b.dim, b.depth, b.heads, cfg.seed,
                       threads=1)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(report.to_json())
    (out / "bench.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def _sweep_values(axis_key: str, text: str) -> list[str]:
    sep = ";" if axis_key == "model.window_counts" or ";" in text else ","
    return [v.strip() for v in text.split(sep) if v.strip()]


def cmd_sweep(cfg: C.RunConfig, args) -> int:
    if not args.axis or not args.values:
        raise C.ConfigError(["sweep: --axis and --values are required"])
    key = SWEEP_AXES.get(args.axis, args.axis)
    root = prepare_run_dir(args.out or cfg.out_dir, args.force)
    runs = []
    for value in _sweep_values(key, args.values):
        run_cfg = copy.deepcopy(cfg)
        try:
            C.set_key(run_cfg, key, value)
        except KeyError:
            raise C.ConfigError([f"--axis: unknown config key {key!r}"]) from None
        except ValueError as exc:
            raise C.ConfigError([f"--values: {value!r}: {exc}"]) from None
        run_cfg.mode = "pretrain"
        C.validate(run_cfg)
        tag = value.replace(":", "x").replace(",", "_")
        run_dir = root / f"{args.axis}={tag}"
        run_cfg.out_dir = str(run_dir)
        run_dir.mkdir(parents=True)
        res = run_pretrain(run_cfg, run_dir)
        means = res.epoch_means()
        row = {"axis": args.axis, "value": value, "run_dir": str(run_dir),
               "final_loss": means[max(means)] if means else None}
        if args.with_finetune:
            from .seg import finetune_loop

            state = res.student.encoder_state()
            ft = finetune_loop(run_cfg, _labeled(run_cfg, "train", run_cfg.finetune.n_train),
                               _labeled(run_cfg, "test"), state, run_dir / "finetune")
            row["test_miou"] = ft.final.mean
        runs.append(row)
        print(json.dumps(row))
    (root / "sweep.jsonl").write_text("".join(json.dumps(r) + "\n" for r in runs))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emlrseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output / run directory")
        p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override")
        if name in ("finetune", "eval"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
            p.add_argument("--png", action="store_true", help="export predicted label rasters")
        if name == "sweep":
            p.add_argument("--axis", help=f"one of {sorted(SWEEP_AXES)} or a dotted config key")
            p.add_argument("--values", help="comma-separated values (';' between window plans)")
            p.add_argument("--with-finetune", action="store_true", help="finetune each run and report test mIoU")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config)
        for item in args.set:
            k, sep, v = item.partition("=")
            if not sep:
                raise C.ConfigError([f"--set: expected KEY=VALUE, got {item!r}"])
            try:
                C.set_key(cfg, k, v)
            except KeyError:
                raise C.ConfigError([f"--set: unknown key {k!r}"]) from None
            except ValueError as exc:
                raise C.ConfigError([f"--set {k}: {exc}"]) from None
        cfg.mode = args.command
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out and args.command in ("pretrain", "finetune"):
            cfg.out_dir = args.out
        C.validate(cfg)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except (C.ConfigError, RunDirExists) as exc:
        for msg in getattr(exc, "errors", [str(exc)]):
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, synth.PlacementError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        from .pretrain import NumericalError

        if isinstance(exc, NumericalError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
