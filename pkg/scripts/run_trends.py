"""Run the trend study behind the acceptance checks and print the medians.

    python scripts/run_trends.py [--config cfg.json] [--out runs/trends] [--seeds 0,1,2,3,4]
"""

import argparse
import logging
import statistics

from s2sp.config import ExperimentConfig
from s2sp.experiment import run_trend_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/trends")
    ap.add_argument("--seeds")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.replace(output_dir=args.out)
    if args.seeds:
        cfg = cfg.replace(seeds=[int(s) for s in args.seeds.split(",")])
    res = run_trend_study(cfg)
    by_run = {}
    for r in res["rows"]:
        by_run.setdefault(r["run"], []).append(r)
    for run, rows in by_run.items():
        med = lambda k: statistics.median(r[k] for r in rows)  # noqa: E731
        print(f"{run:>20s}  BLEU {med('valid_bleu'):6.2f}  valid ppl {med('valid_ppl'):.4f}  "
              f"gap {med('generalization_gap'):+.4f}  forgetting {med('forgetting'):+.3f}")


if __name__ == "__main__":
    main()
