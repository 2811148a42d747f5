"""Factorised Gaussian weights, reparameterised sampling and the Gaussian KL.

Each weight matrix W has an elementwise posterior N(mu, sigma^2) with the
standard deviation stored through a pre-deviation ``g`` so that
``sigma = g**2`` is non-negative without any constraint on ``g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .numerics import Var

DEFAULT_DELTA = 0.1
PRIOR_SIGMA = 0.1
PRIOR_MU = 0.0
SIGMA_FLOOR = 1e-12


@dataclass
class GaussianParameter:
    name: str
    mu: Var
    g: Var

    def __post_init__(self):
        if self.mu.shape != self.g.shape:
            raise ShapeError(f"{self.name}: mu shape {self.mu.shape} != g shape {self.g.shape}")
        self.mu.requires_grad = True
        self.g.requires_grad = True
        self.mu.name = f"{self.name}.mu"
        self.g.name = f"{self.name}.g"

    @classmethod
    def from_arrays(cls, name: str, mu, g) -> "GaussianParameter":
        return cls(name, Var(np.array(mu, dtype=np.float64)), Var(np.array(g, dtype=np.float64)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return self.g.value * self.g.value

    def leaves(self) -> tuple[Var, Var]:
        return self.mu, self.g


@dataclass(frozen=True)
class PriorSpec:
    mu0: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        if self.mu0.shape != self.sigma0.shape:
            raise ShapeError(f"prior mu0 shape {self.mu0.shape} != sigma0 shape {self.sigma0.shape}")
        if not np.all(self.sigma0 > 0):
            raise ConfigError("prior standard deviations must be strictly positive")

    @classmethod
    def constant(cls, shape, mu0: float = PRIOR_MU, sigma0: float = PRIOR_SIGMA) -> "PriorSpec":
        return cls(np.full(shape, float(mu0)), np.full(shape, float(sigma0)))


def init_gaussian_param(name: str, shape, d: int, delta: float, rng: np.random.Generator) -> GaussianParameter:
    """mu ~ U(-sqrt(6/d), sqrt(6/d)), g ~ U(delta/sqrt(2), delta)."""
    if d < 1:
        raise ConfigError(f"hidden dimension must be >= 1, got {d}")
    if not delta > 0:
        raise ConfigError(f"delta must be > 0, got {delta}")
    bound = math.sqrt(6.0 / d)
    mu = rng.uniform(-bound, bound, size=shape)
    g = rng.uniform(delta / math.sqrt(2.0), delta, size=shape)
    return GaussianParameter.from_arrays(name, mu, g)


def sample(p: GaussianParameter, rng: np.random.Generator | None = None, eps: np.ndarray | None = None):
    """Reparameterised draw ``W = mu + g**2 * eps``.

    Pass ``eps`` to replay a previous draw; otherwise it is drawn from ``rng``.
    Returns ``(W, eps)``.
    """
    if eps is None:
        if rng is None:
            raise ConfigError("sample needs either rng or eps")
        eps = rng.standard_normal(p.shape)
    elif eps.shape != p.shape:
        raise ShapeError(f"{p.name}: eps shape {eps.shape} != parameter shape {p.shape}")
    w = nx.add(p.mu, nx.mul(nx.square(p.g), eps))
    return w, eps


def kl_to_prior(p: GaussianParameter, prior: PriorSpec) -> Var:
    """Sum of elementwise KL(N(mu, sigma^2) || N(mu0, sigma0^2)), sigma = g**2.

    sigma is floored at 1e-12 inside the log only.
    """
    if prior.mu0.shape != p.shape:
        raise ShapeError(f"{p.name}: prior shape {prior.mu0.shape} != parameter shape {p.shape}")
    sigma = nx.square(p.g)
    inv_two_var0 = 1.0 / (2.0 * prior.sigma0 * prior.sigma0)
    log_ratio = nx.sub(np.log(prior.sigma0), nx.log(nx.clamp_min(sigma, SIGMA_FLOOR)))
    quad = nx.mul(nx.add(nx.square(sigma), nx.square(nx.sub(p.mu, prior.mu0))), inv_two_var0)
    return nx.sum_all(nx.add(nx.add(log_ratio, quad), -0.5))


def kl_value(mu, sigma, mu0, sigma0) -> np.ndarray:
    """Elementwise Gaussian KL on plain arrays, for diagnostics."""
    mu, sigma, mu0, sigma0 = map(np.asarray, (mu, sigma, mu0, sigma0))
    return (
        np.log(sigma0) - np.log(np.maximum(sigma, SIGMA_FLOOR))
        + (sigma**2 + (mu - mu0) ** 2) / (2.0 * sigma0**2)
        - 0.5
    )


def posterior_snapshot(params) -> dict[str, PriorSpec]:
    """Deep-copied (mu, g**2) of every parameter, keyed by name.

    sigma0 is floored at 1e-12 so a collapsed deviation still yields a valid prior.
    """
    return {
        p.name: PriorSpec(p.mu.value.copy(), np.maximum(p.g.value * p.g.value, SIGMA_FLOOR))
        for p in params
    }
