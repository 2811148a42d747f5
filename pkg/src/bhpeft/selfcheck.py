"""Analytic-oracle battery behind ``bhpeft selfcheck``.

Each check compares a library routine against an independent computation:
numerical quadrature for the Gaussian KL, central finite differences for
the ELBO gradient, and a PEFT-free forward pass for the l=0, s=0 reduction.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from . import numerics as nx
from .model import BHPeftModel, ModelConfig, forward_batch, plain_forward
from .training import negative_elbo
from .variational import kl_value

KL_ANCHORS = ((0.1, 0.1, 0.0, 0.1, 0.5), (0.0, 0.2, 0.0, 0.1, math.log(0.5) + 2.0 - 0.5))


def kl_quadrature(mu: float, sigma: float, mu0: float, sigma0: float) -> float:
    """KL(N(mu, sigma^2) || N(mu0, sigma0^2)) by adaptive quadrature of q log(q/p)."""

    def integrand(w):
        lq = -0.5 * ((w - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
        lp = -0.5 * ((w - mu0) / sigma0) ** 2 - math.log(sigma0) - 0.5 * math.log(2 * math.pi)
        return math.exp(lq) * (lq - lp)

    half = 12.0 * sigma
    val, _ = integrate.quad(integrand, mu - half, mu + half, epsabs=0.0, epsrel=1e-11, limit=400, points=[mu])
    return val


def fd_relative_errors(model: BHPeftModel, seqs, targets, mc_samples=1, kl_weight=1.0, dataset_size=None,
                       seed=0, h=1e-6, floor=1e-8) -> dict[str, float]:
    """Max relative error per trainable leaf: autograd vs central differences.

    The reparameterisation noise of the first evaluation is replayed for
    every perturbed evaluation, so the loss is a deterministic function.
    """
    n = dataset_size or len(seqs)
    rng = np.random.default_rng(seed)
    model.zero_grad()
    terms = negative_elbo(model, seqs, targets, mc_samples, kl_weight, n, rng)
    eps = terms.eps
    leaves = model.trainable()
    grads = nx.backward(terms.loss, wrt=leaves)

    def loss_value():
        with nx.no_grad():
            return float(negative_elbo(model, seqs, targets, mc_samples, kl_weight, n, eps=eps).loss.value)

    out = {}
    for leaf in leaves:
        analytic = grads[leaf]
        worst = 0.0
        flat = leaf.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        out[leaf.name] = worst
    model.zero_grad()
    return out


def small_model(seed: int = 0, **overrides) -> BHPeftModel:
    """The d=4, h=2, L=1, l=2, r_A=r_P=2 instance used for gradient checks."""
    cfg = dict(d=4, heads=2, layers=1, n_max=8, vocab=32, prefix_len=2, r_a=2, r_p=2)
    cfg.update(overrides)
    return BHPeftModel.create(ModelConfig(**cfg), seed=seed)


def run_all() -> list[tuple[str, bool, str]]:
    results = []

    worst = 0.0
    for mu, sigma, mu0, sigma0, expected in KL_ANCHORS:
        closed = float(kl_value(np.array(mu), np.array(sigma), np.array(mu0), np.array(sigma0)))
        quad = kl_quadrature(mu, sigma, mu0, sigma0)
        worst = max(worst, abs(closed - quad) / abs(quad), abs(closed - expected) / expected)
    rng = np.random.default_rng(0)
    for _ in range(50):
        mu, mu0 = rng.uniform(-1, 1, 2)
        sigma, sigma0 = rng.uniform(0.05, 1.0, 2)
        quad = kl_quadrature(mu, sigma, mu0, sigma0)
        closed = float(kl_value(np.array(mu), np.array(sigma), np.array(mu0), np.array(sigma0)))
        worst = max(worst, abs(closed - quad) / max(abs(quad), 1e-300))
    results.append(("kl_vs_quadrature", worst < 1e-6, f"max rel err {worst:.2e}"))

    model = small_model()
    seqs = [(17, 3, 9), (20, 21, 22, 23), (30, 5)]
    errs = fd_relative_errors(model, seqs, np.array([0, 1, 1]))
    worst = max(errs.values())
    results.append(("elbo_gradient_vs_finite_differences", worst < 1e-4, f"max rel err {worst:.2e}"))

    model = small_model(prefix_len=0, scale=0.0)
    weights, _ = model.draw("mean")
    with nx.no_grad():
        same = np.array_equal(forward_batch(model, seqs, weights).value, plain_forward(model, seqs).value)
    results.append(("no_peft_reduces_to_backbone", same, "bitwise" if same else "outputs differ"))
    return results
