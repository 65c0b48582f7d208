"""Global vs windowed attention: counted score entries and median step time.

    python3 scripts/run_bench.py [--grids 14,28] [--trials 20]
"""
import argparse

from emlrseg.bench import run_bench
from emlrseg.mve import DEFAULT_WINDOW_COUNTS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grids", default="14,28")
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="also write the report here")
    args = ap.parse_args()
    report = run_bench([int(g) for g in args.grids.split(",")], DEFAULT_WINDOW_COUNTS, args.trials, 3, 64, 1, 4,
                       args.seed, threads=1)
    print(report.table())
    if args.json:
        with open(args.json, "w") as f:
            f.write(report.to_json())


if __name__ == "__main__":
    main()
