"""Rejection curves on the noisy-region task, one block of rows per seed.

    python3 scripts/rejection_curve.py --seeds 0 1 2 3 4 --out rejection.csv
"""

import argparse
import csv
import sys
from dataclasses import replace

from bhpeft.scenarios import TOY_TRAIN, noisy_rejection


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--rates", default="0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5")
    ap.add_argument("--kl-weight", type=float, default=TOY_TRAIN.kl_weight)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)
    rates = [float(r) for r in args.rates.split(",")]
    cfg = replace(TOY_TRAIN, kl_weight=args.kl_weight)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["seed", "rate", "n_kept", "metric_name", "metric_value"])
    for seed in args.seeds:
        run = noisy_rejection(seed, rates, cfg=cfg)
        for r in run.rows:
            w.writerow([seed, r.rate, r.n_kept, r.metric_name, r.metric_value])
        fh.flush()


if __name__ == "__main__":
    main()
