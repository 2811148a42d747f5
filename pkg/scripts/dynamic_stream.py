"""Phase-shift stream: all four strategies, per-round and forgetting rows.

    python3 scripts/dynamic_stream.py --seeds 0 1 2 3 4 --out dynamic.csv
"""

import argparse
import csv
import sys
from dataclasses import replace

from bhpeft.dynamic import STRATEGIES
from bhpeft.scenarios import PHASE_SIZES, PHASE_SWITCH_ROUND, TOY_TRAIN, phase_shift


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--strategies", nargs="+", default=list(STRATEGIES), choices=STRATEGIES)
    ap.add_argument("--sizes", default=",".join(map(str, PHASE_SIZES)))
    ap.add_argument("--switch-round", type=int, default=PHASE_SWITCH_ROUND)
    ap.add_argument("--epochs", type=int, default=TOY_TRAIN.epochs)
    ap.add_argument("--kl-weight", type=float, default=TOY_TRAIN.kl_weight)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    cfg = replace(TOY_TRAIN, epochs=args.epochs, kl_weight=args.kl_weight)

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["seed", "round", "strategy", "n_train", "metric_name", "metric_value"])
    for seed in args.seeds:
        run = phase_shift(seed, args.strategies, sizes, args.switch_round, cfg)
        for res in run.results.values():
            for r in res.rows + res.forgetting:
                w.writerow([seed, r.round, r.strategy, r.n_train, r.metric_name, r.metric_value])
        fh.flush()


if __name__ == "__main__":
    main()
