"""Command-line entry point: ``bhpeft {train,predict,reject,dynamic,gen-data,selfcheck}``.

Data specs are either a TSV path (``text<TAB>label`` lines) or a generator
spec ``gen:<task>[:key=value...]``, e.g. ``gen:keyword:n=500:seed=1``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import persistence
from .config import SEED_ENV, RunConfig, from_mapping, load_config
from .dynamic import STRATEGIES, config_digest, keyword_stream, phase_shift_stream, run_dynamic
from .errors import BHPeftError, ConfigError, InputError
from .inference import predict_many, rejection_curve
from .model import BHPeftModel
from .training import TrainConfig, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_data_spec(spec: str, run: RunConfig, labels=None) -> data_mod.Dataset:
    if spec.startswith("gen:"):
        parts = spec.split(":")[1:]
        if not parts or not parts[0]:
            raise ConfigError(f"generator spec {spec!r} names no task")
        kwargs = {"n": 100, "seed": run.seed, "vocab": run.model.vocab}
        for item in parts[1:]:
            if "=" not in item:
                raise ConfigError(f"generator spec item {item!r} is not key=value")
            k, v = item.split("=", 1)
            kwargs[k] = _parse_value(v)
        ds = data_mod.generate(parts[0], **kwargs)
    else:
        path = Path(spec)
        if not path.is_file():
            raise InputError(f"data file not found: {path}")
        ds = data_mod.load_text(path, run.model.task, labels or run.labels, run.model.vocab, run.model.n_max)
    ds.check_fits(run.model.n_max, run.model.vocab)
    if ds.task != run.model.task:
        raise InputError(f"data task {ds.task!r} does not match model task {run.model.task!r}")
    if ds.task == "classification" and ds.num_classes != run.model.num_classes:
        raise InputError(f"data has {ds.num_classes} classes, model expects {run.model.num_classes}")
    return ds


def _env_seed(default: int) -> int:
    if os.environ.get(SEED_ENV):
        try:
            return int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return default


def _run_from_checkpoint(ckpt: persistence.Checkpoint) -> RunConfig:
    values = {**ckpt.model.config.to_dict(), **(ckpt.train_config or {})}
    labels = ckpt.provenance.get("labels")
    if labels is not None:
        values["labels"] = labels
    return from_mapping(values, env={})


# commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    run = load_config(args.config)
    ds = parse_data_spec(args.data, run)
    model = BHPeftModel.create(run.model, seed=run.seed)
    result = train(model, ds, run.train)
    _write_csv(
        args.metrics or str(Path(args.out).with_suffix(".metrics.csv")),
        ["epoch", "loss", "nll_term", "kl_term"],
        [[m.epoch, _fmt(m.loss), _fmt(m.nll_term), _fmt(m.kl_term)] for m in result.history],
    )
    provenance = {
        "command": ["train", "--config", str(args.config), "--data", args.data],
        "config_digest": config_digest(run.model, run.train),
        "labels": run.labels,
        "n_train": len(ds),
    }
    ckpt = persistence.Checkpoint(model, run.seed, 1, run.train.to_dict(), {"seed": run.seed}, provenance)
    persistence.save(ckpt, args.out)
    return EXIT_OK


def _load_for_eval(args):
    ckpt = persistence.load(args.checkpoint)
    run = _run_from_checkpoint(ckpt)
    ds = parse_data_spec(args.data, run)
    s_eval = args.samples if args.samples is not None else run.train.eval_samples
    seed = _env_seed(args.seed if args.seed is not None else ckpt.seed)
    return ckpt, ds, s_eval, np.random.default_rng(seed)


def cmd_predict(args) -> int:
    ckpt, ds, s_eval, rng = _load_for_eval(args)
    if s_eval < 1:
        raise ConfigError("--samples must be >= 1")
    with_var = s_eval >= 2
    preds = predict_many(ckpt.model, ds.tokens, s_eval, rng, with_variance=with_var)
    header = ["index", "predicted", "mean_or_probs"] + (["total_uncertainty"] if with_var else [])
    rows = []
    for i, p in enumerate(preds):
        if p.predicted_label is not None:
            predicted, mean = str(p.predicted_label), " ".join(_fmt(v) for v in p.mean_output)
        else:
            predicted = mean = _fmt(p.mean_output[0])
        rows.append([i, predicted, mean] + ([_fmt(p.total_uncertainty)] if with_var else []))
    _write_csv(args.out, header, rows)
    return EXIT_OK


def parse_rates(text: str | None, default) -> list[float]:
    if text is None:
        return list(default)
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse rates {text!r}") from None


def cmd_reject(args) -> int:
    ckpt, ds, s_eval, rng = _load_for_eval(args)
    rates = parse_rates(args.rates, _run_from_checkpoint(ckpt).rates)
    rows = rejection_curve(ckpt.model, ds, rates, s_eval, rng)
    _write_csv(
        args.out, ["rate", "n_kept", "metric_name", "metric_value"],
        [[_fmt(r.rate), r.n_kept, r.metric_name, _fmt(r.metric_value)] for r in rows],
    )
    return EXIT_OK


def cmd_dynamic(args) -> int:
    run = load_config(args.config)
    if args.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {args.strategy!r}; expected one of {STRATEGIES}")
    sizes = [int(s) for s in args.sizes.split(",")]
    if args.stream == "phase-shift":
        stream = phase_shift_stream(sizes, run.seed, switch_round=args.switch_round, vocab=run.model.vocab)
    else:
        stream = keyword_stream(sizes, run.seed, vocab=run.model.vocab, task=args.stream)
    model = BHPeftModel.create(run.model, seed=run.seed)
    result = run_dynamic(model, stream.rounds, args.strategy, run.train, stream.heldout, stream.probes,
                         run.selection_fraction)
    _write_csv(
        args.out, ["round", "strategy", "n_train", "metric_name", "metric_value"],
        [[r.round, r.strategy, r.n_train, r.metric_name, _fmt(r.metric_value)]
         for r in result.rows + result.forgetting],
    )
    manifest = {**result.manifest, "stream": args.stream, "switch_round": args.switch_round}
    if args.manifest:
        Path(args.manifest).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if args.checkpoint:
        provenance = {
            "command": ["dynamic", "--config", str(args.config), "--stream", args.stream, "--strategy", args.strategy,
                        "--sizes", args.sizes],
            "config_digest": manifest["config_digest"],
            "labels": run.labels,
        }
        persistence.save(
            persistence.Checkpoint(result.model, run.seed, len(sizes), run.train.to_dict(), {"seed": run.seed},
                                   provenance),
            args.checkpoint,
        )
    return EXIT_OK


def cmd_gen_data(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param {item!r} is not key=value")
        k, v = item.split("=", 1)
        params[k] = _parse_value(v)
    ds = data_mod.generate(args.task, args.n, _env_seed(args.seed), vocab=args.vocab, **params)
    data_mod.write_tsv(ds, args.out)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bhpeft", description="Bayesian hybrid PEFT on a frozen toy transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train and write a checkpoint plus metrics CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="TSV path or gen:<task>[:k=v...]")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("predict", cmd_predict, "Monte Carlo predictions"),
                              ("reject", cmd_reject, "rejection curve")):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--samples", type=int, help="S_eval (default: checkpoint eval_samples)")
        q.add_argument("--seed", type=int, help="sampling seed (default: checkpoint seed)")
        q.add_argument("--out", default="-")
        if name == "reject":
            q.add_argument("--rates", help="comma-separated ascending rates in [0, 1)")
        q.set_defaults(func=func)

    d = sub.add_parser("dynamic", help="streaming fine-tuning with one strategy")
    d.add_argument("--config", required=True)
    d.add_argument("--strategy", required=True)
    d.add_argument("--stream", default="phase-shift", choices=["phase-shift", "keyword", "noisy-region"])
    d.add_argument("--sizes", default="20,40,80,160,320,640")
    d.add_argument("--switch-round", type=int)
    d.add_argument("--out", default="-")
    d.add_argument("--manifest")
    d.add_argument("--checkpoint")
    d.set_defaults(func=cmd_dynamic)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as TSV")
    g.add_argument("--task", required=True, choices=list(data_mod.GENERATORS))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab", type=int, default=512)
    g.add_argument("--param", action="append", help="generator parameter key=value")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("selfcheck", help="run the analytic-oracle battery")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BHPeftError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
