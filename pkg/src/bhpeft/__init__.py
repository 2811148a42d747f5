"""Bayesian hybrid parameter-efficient fine-tuning on a frozen toy transformer.

A frozen miniature transformer is extended with Bayesian prefix-tuning and a
Bayesian scaled parallel adapter. Both are trained by variational inference,
with Monte Carlo predictive uncertainty, rejection curves and
posterior-to-prior chaining for streaming data.
"""

from .data import Dataset, generate, load_text, split
from .dynamic import STRATEGIES, run_dynamic
from .inference import Prediction, predict, predict_many, rejection_curve
from .model import BHPeftModel, ModelConfig, forward
from .training import TrainConfig, negative_elbo, train
from .variational import GaussianParameter, PriorSpec, kl_to_prior, posterior_snapshot

__version__ = "0.1.0"

__all__ = [
    "BHPeftModel",
    "Dataset",
    "GaussianParameter",
    "ModelConfig",
    "Prediction",
    "PriorSpec",
    "STRATEGIES",
    "TrainConfig",
    "forward",
    "generate",
    "kl_to_prior",
    "load_text",
    "negative_elbo",
    "posterior_snapshot",
    "predict",
    "predict_many",
    "rejection_curve",
    "run_dynamic",
    "split",
    "train",
]
