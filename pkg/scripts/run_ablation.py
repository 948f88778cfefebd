"""Ablation grid: median BLEU delta of every transfer mode against full.

    python scripts/run_ablation.py [--config cfg.json] [--out runs/ablation] [--seeds 0,1,2]
"""

import argparse
import logging

from s2sp.config import ExperimentConfig
from s2sp.experiment import run_ablation_grid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.replace(output_dir=args.out)
    if args.seeds:
        cfg = cfg.replace(seeds=[int(s) for s in args.seeds.split(",")])
    for row in run_ablation_grid(cfg)["rows"]:
        ref = "" if row["reference_delta"] is None else f"  (reference {row['reference_delta']:+.1f})"
        print(f"{row['mode']:>22s}  BLEU {row['median_bleu']:6.2f}  delta {row['median_delta_bleu']:+6.2f}{ref}")


if __name__ == "__main__":
    main()
