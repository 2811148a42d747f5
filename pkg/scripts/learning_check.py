"""Keyword-task learning check: held-out mean-mode accuracy per seed.

    python3 scripts/learning_check.py --seeds 0 1 2 --out learning.csv
"""

import argparse
import csv
import sys
import time
from dataclasses import replace

from bhpeft.scenarios import TOY_TRAIN, keyword_learning


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=TOY_TRAIN.epochs)
    ap.add_argument("--kl-weight", type=float, default=TOY_TRAIN.kl_weight)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)
    cfg = replace(TOY_TRAIN, epochs=args.epochs, kl_weight=args.kl_weight)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["seed", "epochs", "kl_weight", "accuracy", "backbone_unchanged", "seconds"])
    for seed in args.seeds:
        t0 = time.perf_counter()
        run = keyword_learning(seed, cfg=cfg)
        w.writerow([seed, run.epochs, run.kl_weight, run.accuracy, run.backbone_unchanged,
                    f"{time.perf_counter() - t0:.1f}"])
        fh.flush()


if __name__ == "__main__":
    main()
