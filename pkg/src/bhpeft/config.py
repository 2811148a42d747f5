"""Flat YAML run configuration.

Every key of :class:`ModelConfig` and :class:`TrainConfig` may appear at the
top level, plus ``labels`` (class names for TSV input), ``rates``
(rejection rates) and ``selection_fraction`` (data_selection baseline).
``BHPEFT_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .dynamic import SELECTION_FRACTION
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SEED_ENV = "BHPEFT_SEED"
DEFAULT_RATES = tuple(round(0.05 * i, 2) for i in range(11))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    labels: list[str] | None = None
    rates: tuple[float, ...] = DEFAULT_RATES
    selection_fraction: float = SELECTION_FRACTION

    @property
    def seed(self) -> int:
        return self.train.seed


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_EXTRA_KEYS = {"labels", "rates", "selection_fraction"}


def from_mapping(values: dict, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    values = dict(values or {})
    unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS - _EXTRA_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        model = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
        train = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    rates = tuple(float(r) for r in values.get("rates", DEFAULT_RATES))
    labels = values.get("labels")
    if labels is not None:
        labels = [str(x) for x in labels]
        if model.task == "classification" and len(labels) != model.num_classes:
            raise ConfigError(f"{len(labels)} labels given for num_classes={model.num_classes}")
    return RunConfig(model, train, labels, rates, float(values.get("selection_fraction", SELECTION_FRACTION)))


def load_config(path, env: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    return from_mapping(values or {}, env)
