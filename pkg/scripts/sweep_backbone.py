"""Backbone-length sweep: vary how many blocks live in the heads.

Compares accuracy and prediction disagreement across split points,
mirroring the blocks-in-head analysis from the main experiments.

Usage: python3 scripts/sweep_backbone.py [--seeds 0,1,2] [--out DIR]
"""

import argparse
import csv
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sparsetrails.cli import run_sweep
from sparsetrails.config import load_config, network_spec

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "rings.json"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", default="runs/backbone_sweep")
    args = parser.parse_args()

    cfg = load_config(str(CONFIG), out_dir=args.out)
    blocks = network_spec(cfg).num_blocks
    values = list(range(blocks + 1))
    seeds = [int(s) for s in args.seeds.split(",")]
    sweep_csv = run_sweep(cfg, "blocks_in_head", values, seeds, args.out)

    print(f"\n{'blocks_in_head':>15s} {'accuracy':>10s} {'pd':>8s}")
    for row in csv.DictReader(open(sweep_csv)):
        pd = row["pd_mean"] or "-"
        print(f"{row['value']:>15s} {row['accuracy_mean']:>10s} {pd:>8s}")


if __name__ == "__main__":
    main()
