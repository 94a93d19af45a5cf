"""Sparsity-ratio sweep over the rings task, dense through ultra-sparse.

Usage: python3 scripts/sweep_sparsity.py [--values 0,0.5,0.8,0.95,0.99]
                                         [--seeds 0,1,2] [--out DIR]
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sparsetrails.cli import run_sweep
from sparsetrails.config import load_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "rings.json"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--values", default="0,0.5,0.8,0.95,0.99")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", default="runs/sparsity_sweep")
    args = parser.parse_args()

    cfg = load_config(str(CONFIG), out_dir=args.out)
    values = [float(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    sweep_csv = run_sweep(cfg, "sparsity", values, seeds, args.out)

    print(f"\n{'sparsity':>9s} {'accuracy':>10s} {'nll':>8s}")
    for row in csv.DictReader(open(sweep_csv)):
        print(f"{row['value']:>9s} {row['accuracy_mean']:>10s} {row['nll_mean']:>8s}")


if __name__ == "__main__":
    main()
