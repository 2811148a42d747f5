"""Streaming fine-tuning: posterior-to-prior chaining and three baselines.

Strategies
----------
bayesian_chain
    Round k > 1 starts from round k-1's variational state and uses its
    posterior as the prior; trains on the new round only.
data_pooling
    Re-initialises to the round-1 starting state and trains on the union of
    all rounds so far.
parameter_init
    Continues from the previous round's values but keeps the constant
    N(0, 0.1^2) prior; trains on the new round only.
data_selection
    As parameter_init, plus a uniform random fraction of earlier rounds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, generate
from .errors import ConfigError, InputError
from .inference import mean_mode_metric
from .model import BHPeftModel
from .training import TrainConfig, train
from .variational import posterior_snapshot

STRATEGIES = ("bayesian_chain", "data_pooling", "parameter_init", "data_selection")
SELECTION_FRACTION = 0.25


def chain_prior(model: BHPeftModel) -> BHPeftModel:
    """Replace every prior with a snapshot of the current posterior."""
    model.set_priors(posterior_snapshot(model.gaussian_params()))
    return model


def geometric_sizes(start: int = 10, rounds: int = 10, ratio: int = 2) -> list[int]:
    return [start * ratio**k for k in range(rounds)]


def round_seed(seed: int, k: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, k, salt]).generate_state(1)[0])


@dataclass
class DynamicRow:
    round: int | str
    strategy: str
    n_train: int
    metric_name: str
    metric_value: float


@dataclass
class DynamicResult:
    strategy: str
    rows: list[DynamicRow]  # one held-out row per round, then the average row
    forgetting: list[DynamicRow]  # metric on earlier rounds' data and probe sets
    model: BHPeftModel
    kl_at_round_start: list[float]
    manifest: dict = field(default_factory=dict)


def config_digest(*objs) -> str:
    blob = json.dumps([o if isinstance(o, dict) else o.to_dict() for o in objs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_dynamic(
    init_model: BHPeftModel,
    rounds: list[Dataset],
    strategy: str,
    cfg: TrainConfig,
    heldout: Dataset,
    probes: dict[str, Dataset] | None = None,
    selection_fraction: float = SELECTION_FRACTION,
) -> DynamicResult:
    """Fine-tune across a stream of rounds and evaluate in mean mode after each.

    ``init_model`` is not modified. Round k trains with a seed derived from
    ``(cfg.seed, k)`` so every strategy shares the same round-1 trajectory.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not rounds:
        raise InputError("stream has no rounds")
    for k, ds in enumerate(rounds, 1):
        if len(ds) == 0:
            raise InputError(f"round {k} is empty")
    if not 0 <= selection_fraction <= 1:
        raise ConfigError("selection_fraction must be in [0, 1]")
    probes = probes or {}

    model = init_model.clone()
    model.reset_priors()
    rows, forgetting, kl_start = [], [], []
    for k, ds in enumerate(rounds, 1):
        history = rounds[: k - 1]
        if strategy == "bayesian_chain":
            if k > 1:
                chain_prior(model)
            train_set = ds
        elif strategy == "data_pooling":
            model = init_model.clone()
            model.reset_priors()
            train_set = _union(rounds[:k])
        elif strategy == "parameter_init":
            train_set = ds
        else:
            train_set = ds
            if history:
                pool = _union(history)
                n_sel = int(round(selection_fraction * len(pool)))
                if n_sel:
                    rng = np.random.default_rng(round_seed(cfg.seed, k, salt=1))
                    train_set = ds.concat(pool.subset(sorted(rng.choice(len(pool), n_sel, replace=False))))
        kl_start.append(float(model.kl().value))
        train(model, train_set, replace(cfg, seed=round_seed(cfg.seed, k)))
        name, value = mean_mode_metric(model, heldout)
        rows.append(DynamicRow(k, strategy, len(train_set), name, value))
        for j, past in enumerate(history, 1):
            pname, pvalue = mean_mode_metric(model, past)
            forgetting.append(DynamicRow(k, strategy, len(train_set), f"{pname}@round{j}", pvalue))
        for label, probe in probes.items():
            pname, pvalue = mean_mode_metric(model, probe)
            forgetting.append(DynamicRow(k, strategy, len(train_set), f"{pname}@{label}", pvalue))
    rows.append(
        DynamicRow("avg", strategy, int(sum(r.n_train for r in rows)), rows[0].metric_name,
                   float(np.mean([r.metric_value for r in rows])))
    )
    manifest = {
        "strategy": strategy,
        "seed": cfg.seed,
        "config_digest": config_digest(init_model.config, cfg),
        "model_config": init_model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "round_sizes": [len(r) for r in rounds],
        "strategy_params": {
            "selection_fraction": selection_fraction if strategy == "data_selection" else None,
            "pooling_reset": "round-1 initialisation each round" if strategy == "data_pooling" else None,
            "prior": "chained posterior" if strategy == "bayesian_chain" else "constant",
        },
        "kl_weight_departure": cfg.kl_weight != 1.0,
    }
    return DynamicResult(strategy, rows, forgetting, model, kl_start, manifest)


def _union(parts: list[Dataset]) -> Dataset:
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out


# streams -------------------------------------------------------------------------


@dataclass
class Stream:
    rounds: list[Dataset]
    heldout: Dataset
    probes: dict[str, Dataset]


def keyword_stream(sizes, seed: int, heldout_n: int = 200, vocab: int = 512, task: str = "keyword") -> Stream:
    """Stationary stream: every round and the held-out split share one generator."""
    rounds = [generate(task, n, round_seed(seed, k, salt=2), vocab=vocab) for k, n in enumerate(sizes, 1)]
    return Stream(rounds, generate(task, heldout_n, round_seed(seed, 0, salt=3), vocab=vocab), {})


def phase_shift_stream(sizes, seed: int, switch_round: int | None = None, heldout_n: int = 200,
                       vocab: int = 512) -> Stream:
    """Two-phase drift: rounds before ``switch_round`` use keyword phase 1, the rest phase 2.

    The held-out split and the ``phase2`` probe are phase-2 data; the
    ``phase1`` probe measures retention of the first phase.
    """
    k_total = len(sizes)
    switch_round = switch_round or k_total // 2 + 1
    if not 2 <= switch_round <= k_total:
        raise ConfigError("switch_round must fall inside the stream")
    rounds = [
        generate("phase-shift", n, round_seed(seed, k, salt=2), vocab=vocab, phase=1 if k < switch_round else 2)
        for k, n in enumerate(sizes, 1)
    ]
    probes = {
        "phase1": generate("phase-shift", heldout_n, round_seed(seed, 0, salt=4), vocab=vocab, phase=1),
    }
    heldout = generate("phase-shift", heldout_n, round_seed(seed, 0, salt=3), vocab=vocab, phase=2)
    return Stream(rounds, heldout, probes)
