"""Monte Carlo predictive mean, predictive variance and rejection curves."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import Dataset
from .errors import ConfigError, InputError
from .model import BHPeftModel, forward_batch

CHUNK = 256


@dataclass
class Prediction:
    mean_output: np.ndarray  # class probabilities, or shape (1,) for regression
    variance: np.ndarray | None  # per-class (or scalar) unbiased variance; None if S_eval == 1
    total_uncertainty: float | None
    predicted_label: int | None
    s_eval: int


def _outputs(model: BHPeftModel, seqs, mode: str, rng) -> np.ndarray:
    weights, _ = model.draw(mode, rng)
    return np.concatenate(
        [forward_batch(model, seqs[i : i + CHUNK], weights).value for i in range(0, len(seqs), CHUNK)]
    )


def sample_outputs(model: BHPeftModel, seqs, s_eval: int, rng: np.random.Generator) -> np.ndarray:
    """``[S, N, out]`` per-sample predictions: probabilities or regression outputs.

    Weight draw ``i`` is shared by every sequence in ``seqs``.
    """
    seqs = [list(s) for s in seqs]
    draws = []
    with nx.no_grad():
        for _ in range(s_eval):
            out = _outputs(model, seqs, "sample", rng)
            if model.config.task == "classification":
                out = nx.softmax_value(out, axis=1)
            draws.append(out)
    return np.stack(draws)


def summarize(samples: np.ndarray, task: str, with_variance: bool = True) -> list[Prediction]:
    """Predictions from stacked ``[S, N, out]`` samples."""
    s_eval = samples.shape[0]
    if with_variance and s_eval < 2:
        raise ConfigError("predictive variance needs S_eval >= 2")
    # Shifted by the first draw: identical draws give their exact value and zero variance.
    dev = samples - samples[0]
    shift = dev.mean(axis=0)
    mean = samples[0] + shift
    var = ((dev - shift) ** 2).sum(axis=0) / (s_eval - 1) if with_variance else None
    preds = []
    for i in range(samples.shape[1]):
        v = None if var is None else var[i]
        preds.append(
            Prediction(
                mean_output=mean[i],
                variance=v,
                total_uncertainty=None if v is None else float(v.sum()),
                predicted_label=int(np.argmax(mean[i])) if task == "classification" else None,
                s_eval=s_eval,
            )
        )
    return preds


def predict_many(model, seqs, s_eval: int, rng, with_variance: bool = True) -> list[Prediction]:
    if with_variance and s_eval < 2:
        raise ConfigError("predictive variance needs S_eval >= 2")
    if s_eval < 1:
        raise ConfigError("S_eval must be >= 1")
    return summarize(sample_outputs(model, seqs, s_eval, rng), model.config.task, with_variance)


def predict(model, tokens, s_eval: int, rng, with_variance: bool = True) -> Prediction:
    """Predictive mean and variance for one sequence from ``s_eval`` weight draws."""
    return predict_many(model, [tokens], s_eval, rng, with_variance)[0]


def mean_mode_metric(model: BHPeftModel, ds: Dataset) -> tuple[str, float]:
    """Accuracy (classification) or MSE (regression) with every weight at its mean."""
    with nx.no_grad():
        out = _outputs(model, [list(s) for s in ds.tokens], "mean", None)
    return _metric(ds.task, out, ds.targets)


def _metric(task: str, out: np.ndarray, targets: np.ndarray) -> tuple[str, float]:
    if task == "classification":
        return "accuracy", float(np.mean(np.argmax(out, axis=1) == targets))
    return "mse", float(np.mean((out[:, 0] - targets) ** 2))


@dataclass
class RejectionRow:
    rate: float
    n_kept: int
    metric_name: str
    metric_value: float


def n_rejected(rate: float, n: int) -> int:
    # round() guards ceil against products like 0.1 * 30 = 3.0000000000000004
    return math.ceil(round(rate * n, 9))


def rejection_curve(model, ds: Dataset, rates, s_eval: int, rng, predictions=None) -> list[RejectionRow]:
    """Metric on the examples that survive rejecting the ceil(rate * N) most uncertain.

    Ties in uncertainty reject the later-indexed example first.
    """
    rates = [float(r) for r in rates]
    if not rates:
        raise InputError("no rejection rates given")
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise InputError("rejection rates must be sorted ascending")
    n = len(ds)
    for r in rates:
        if not 0 <= r < 1:
            raise InputError(f"rejection rate {r} outside [0, 1)")
        if n - n_rejected(r, n) < 1:
            raise InputError(f"rejection rate {r} leaves no examples")
    preds = predictions if predictions is not None else predict_many(model, ds.tokens, s_eval, rng)
    unc = np.array([p.total_uncertainty for p in preds])
    ranked = sorted(range(n), key=lambda i: (-unc[i], -i))
    if ds.task == "classification":
        out = np.array([p.mean_output for p in preds])
    else:
        out = np.array([p.mean_output for p in preds]).reshape(n, 1)
    targets = ds.targets
    rows = []
    for r in rates:
        k = n_rejected(r, n)
        keep = np.ones(n, dtype=bool)
        keep[ranked[:k]] = False
        name, value = _metric(ds.task, out[keep], targets[keep])
        rows.append(RejectionRow(r, int(keep.sum()), name, value))
    return rows
