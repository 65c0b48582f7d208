"""Finetune from a pretrained checkpoint and from scratch, several seeds each.

    python3 scripts/run_finetune_compare.py runs/toy/ckpt_final.bin --seeds 0,1,2
"""
import argparse
import json

import numpy as np
from threadpoolctl import threadpool_limits

from emlrseg import cli
from emlrseg import config as C
from emlrseg.seg import encoder_state_from_checkpoint, evaluate, finetune_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    base = C.load(args.config)
    state = encoder_state_from_checkpoint(args.checkpoint)
    train = cli._labeled(base, "train", base.finetune.n_train)
    test = cli._labeled(base, "test")
    scores = {"pretrained": [], "scratch": []}
    with threadpool_limits(limits=1):
        for seed in (int(s) for s in args.seeds.split(",")):
            for kind in scores:
                cfg = C.load(args.config)
                cfg.seed = seed
                ft = finetune_loop(cfg, train, None, state if kind == "pretrained" else None)
                score = evaluate(ft.model, *test, cfg.finetune.num_classes).mean
                scores[kind].append(score)
                print(json.dumps({"seed": seed, "init": kind, "test_miou": round(score, 4)}))
    for kind, vals in scores.items():
        print(f"{kind:10s} mean test mIoU {100 * np.mean(vals):.2f}  (std {100 * np.std(vals):.2f})")


if __name__ == "__main__":
    main()
