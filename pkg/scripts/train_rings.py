"""Train the flagship rings configuration and print the final test metrics.

Usage: python3 scripts/train_rings.py [--seed N] [--out DIR]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sparsetrails.cli import run_experiment
from sparsetrails.config import load_config

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "rings.json"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    cfg = load_config(str(CONFIG), seed=args.seed, out_dir=args.out)
    out, history = run_experiment(cfg)
    final = history.evals[-1]
    print(f"\nfinal: accuracy {final.accuracy:.4f}  nll {final.nll:.4f}  "
          f"ece {final.ece:.4f}  pd {final.pd:.4f}")
    ledger = history.ledger
    print(f"forward FLOPs/sample: sparse {ledger.forward_sparse} vs dense "
          f"{ledger.forward_dense} ({ledger.forward_sparse / ledger.forward_dense:.2%})")
    print(f"artifacts in {out}")


if __name__ == "__main__":
    main()
