"""Pretrained-vs-none BLEU gap as the parallel data shrinks.

    python scripts/run_data_fraction.py [--config cfg.json] [--fractions 0.1,0.2,0.5,1.0]
"""

import argparse
import logging

from s2sp.config import ExperimentConfig
from s2sp.experiment import run_data_fraction


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/data_fraction")
    ap.add_argument("--seeds")
    ap.add_argument("--fractions", default="0.2,1.0")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.replace(output_dir=args.out)
    if args.seeds:
        cfg = cfg.replace(seeds=[int(s) for s in args.seeds.split(",")])
    res = run_data_fraction(cfg, [float(f) for f in args.fractions.split(",")])
    for row in res["rows"]:
        print(f"fraction {row['fraction']:.2f}  pretrained {row['median_pretrained_bleu']:6.2f}  "
              f"none {row['median_none_bleu']:6.2f}  gap {row['median_gap']:+6.2f}")


if __name__ == "__main__":
    main()
