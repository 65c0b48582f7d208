"""Pretrain the toy model and print per-epoch mean losses.

    python3 scripts/run_toy_pretrain.py --out runs/toy [--config configs/toy.cfg] [--set key=value ...]
"""
import argparse
import time

from threadpoolctl import threadpool_limits

from emlrseg import cli
from emlrseg import config as C


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--force", action="store_true")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()

    cfg = C.load(args.config)
    for item in args.set:
        k, _, v = item.partition("=")
        C.set_key(cfg, k, v)
    cfg.out_dir = args.out
    C.validate(cfg)
    run_dir = cli.prepare_run_dir(args.out, args.force)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        res = cli.run_pretrain(cfg, run_dir)
    means = res.epoch_means()
    for epoch, loss in means.items():
        print(f"epoch {epoch:3d}  mean loss {loss:.4f}")
    first, last = means[min(means)], means[max(means)]
    print(f"final/first = {last / first:.3f}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
