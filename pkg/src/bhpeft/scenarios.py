"""Reference experiments shared by the acceptance suite and ``scripts/``.

All three use the default model shape (d=32, h=4, L=2, l=4, r_A=r_P=8, s=4,
sigma0=0.1) and the :data:`TOY_TRAIN` optimiser settings. ``TOY_TRAIN``
down-weights the KL term (``kl_weight=0.3``). At this toy scale the full
KL pins the PEFT posterior to its N(0, 0.1^2) prior. Every result records
the weight it used.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import generate
from .dynamic import DynamicResult, phase_shift_stream, run_dynamic
from .inference import RejectionRow, mean_mode_metric, rejection_curve
from .model import BHPeftModel, ModelConfig
from .training import TrainConfig, train

TOY_TRAIN = TrainConfig(epochs=30, batch_size=16, lr=0.005, kl_weight=0.3, eval_samples=32)
PHASE_SIZES = (20, 40, 80, 160, 320, 640)
PHASE_SWITCH_ROUND = 6


@dataclass
class LearningRun:
    seed: int
    accuracy: float
    epochs: int
    backbone_unchanged: bool
    kl_weight: float


def keyword_learning(seed: int, n_train: int = 500, n_eval: int = 200, cfg: TrainConfig = TOY_TRAIN) -> LearningRun:
    """Train on the keyword task and report mean-mode held-out accuracy."""
    model = BHPeftModel.create(ModelConfig(), seed=seed)
    digest = model.backbone.digest()
    train_ds = generate("keyword", n_train, 1000 + seed)
    eval_ds = generate("keyword", n_eval, 2000 + seed)
    train(model, train_ds, replace(cfg, seed=seed))
    _, acc = mean_mode_metric(model, eval_ds)
    return LearningRun(seed, acc, cfg.epochs, model.backbone.digest() == digest, cfg.kl_weight)


@dataclass
class RejectionRun:
    seed: int
    rows: list[RejectionRow]
    kl_weight: float

    def metric_at(self, rate: float) -> float:
        return next(r.metric_value for r in self.rows if abs(r.rate - rate) < 1e-12)


def noisy_rejection(seed: int, rates=(0.0, 0.1, 0.2, 0.3), n_train: int = 500, n_eval: int = 200,
                    cfg: TrainConfig = TOY_TRAIN) -> RejectionRun:
    """Train on noisy-region data, then build a rejection curve on fresh noisy-region data."""
    model = BHPeftModel.create(ModelConfig(), seed=seed)
    train(model, generate("noisy-region", n_train, 1000 + seed), replace(cfg, seed=seed))
    eval_ds = generate("noisy-region", n_eval, 2000 + seed)
    rows = rejection_curve(model, eval_ds, rates, cfg.eval_samples, np.random.default_rng(seed))
    return RejectionRun(seed, rows, cfg.kl_weight)


@dataclass
class PhaseShiftRun:
    seed: int
    results: dict[str, DynamicResult]
    switch_round: int

    def phase1(self, strategy: str) -> list[float]:
        """Phase-1 probe accuracy after each round."""
        return [r.metric_value for r in self.results[strategy].forgetting if r.metric_name.endswith("@phase1")]

    def final_heldout(self, strategy: str) -> float:
        return self.results[strategy].rows[-2].metric_value

    def final_n_train(self, strategy: str) -> int:
        return self.results[strategy].rows[-2].n_train


def phase_shift(seed: int, strategies=("bayesian_chain", "parameter_init", "data_pooling"),
                sizes=PHASE_SIZES, switch_round: int = PHASE_SWITCH_ROUND, cfg: TrainConfig = TOY_TRAIN) -> PhaseShiftRun:
    stream = phase_shift_stream(list(sizes), seed, switch_round=switch_round)
    model = BHPeftModel.create(ModelConfig(), seed=seed)
    results = {
        s: run_dynamic(model, stream.rounds, s, replace(cfg, seed=seed), stream.heldout, stream.probes)
        for s in strategies
    }
    return PhaseShiftRun(seed, results, switch_round)
