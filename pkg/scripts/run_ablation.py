"""Toy ablations over decoder depth, mask ratio or window plan, with finetuning.

    python3 scripts/run_ablation.py decoder_depth 1,2,4 --out runs/ablate_depth
    python3 scripts/run_ablation.py window_counts "3:4,4:2,5:1;3:8;5:2" --out runs/ablate_windows
"""
import sys

from emlrseg import cli


def main():
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    axis, values, *rest = sys.argv[1:]
    sys.exit(cli.main(["sweep", "--axis", axis, "--values", values, "--with-finetune", *rest]))


if __name__ == "__main__":
    main()
