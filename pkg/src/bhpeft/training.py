"""Negative ELBO and the Adam training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset
from .errors import ConfigError, InputError, NonFiniteLossError
from .model import BHPeftModel, forward_batch
from .numerics import Var

NOISE_SIGMA = 1.0


@dataclass
class TrainConfig:
    mc_samples: int = 1
    eval_samples: int = 32
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_weight: float = 1.0
    noise_sigma: float = NOISE_SIGMA
    per_example_eps: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigError("mc_samples (S) must be >= 1")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def log_likelihood(output, target, task: str, noise_sigma: float = NOISE_SIGMA) -> Var:
    """Summed log p(y | output) over a batch.

    ``output`` is ``[B, C]`` logits or ``[B, 1]`` regression outputs (a single
    unbatched row is accepted too); ``target`` is class indices or reals.
    """
    output = nx.as_var(output)
    if output.ndim == 1:
        output = nx.reshape(output, (1, output.shape[0]))
    target = np.atleast_1d(np.asarray(target))
    if task == "classification":
        c = output.shape[1]
        if np.any(target < 0) or np.any(target >= c) or np.any(target != np.round(target)):
            raise InputError(f"class target outside [0, {c})")
        return nx.sum_all(nx.pick(nx.log_softmax(output, axis=1), target.astype(np.int64)))
    if task == "regression":
        resid = nx.sub(nx.reshape(output, (output.shape[0],)), target.astype(np.float64))
        const = -math.log(noise_sigma * math.sqrt(2.0 * math.pi))
        return nx.add(nx.scale(nx.sum_all(nx.square(resid)), -0.5 / noise_sigma**2), const * len(target))
    raise ConfigError(f"unknown task {task!r}")


@dataclass
class ElboTerms:
    loss: Var
    nll: float
    kl: float
    eps: list = field(default_factory=list)


def negative_elbo(
    model: BHPeftModel,
    seqs,
    targets,
    mc_samples: int,
    kl_weight: float,
    dataset_size: int,
    rng: np.random.Generator | None = None,
    eps: list | None = None,
    noise_sigma: float = NOISE_SIGMA,
    per_example_eps: bool = False,
) -> ElboTerms:
    """Minibatch estimate of -ELBO.

    loss = -(1/S) sum_i sum_batch log p(y | x, W_i) + (|B|/N) * kl_weight * KL(q || prior)

    One weight draw per sample index is shared by the whole batch, unless
    ``per_example_eps``. ``eps`` replays the draws recorded in a previous
    call's ``ElboTerms.eps``.
    """
    n_batch = len(seqs)
    if n_batch == 0:
        raise InputError("empty batch")
    if dataset_size < n_batch:
        raise ConfigError(f"dataset size {dataset_size} < batch size {n_batch}")
    if mc_samples < 1:
        raise ConfigError("mc_samples must be >= 1")
    task = model.config.task
    targets = np.asarray(targets)
    used = []
    ll_total = None
    for i in range(mc_samples):
        if per_example_eps:
            draws = []
            for j in range(n_batch):
                weights, e = model.draw("sample", rng, None if eps is None else eps[i][j])
                draws.append(e)
                ll = log_likelihood(forward_batch(model, [seqs[j]], weights), targets[j : j + 1], task, noise_sigma)
                ll_total = ll if ll_total is None else nx.add(ll_total, ll)
            used.append(draws)
        else:
            weights, e = model.draw("sample", rng, None if eps is None else eps[i])
            used.append(e)
            ll = log_likelihood(forward_batch(model, seqs, weights), targets, task, noise_sigma)
            ll_total = ll if ll_total is None else nx.add(ll_total, ll)
    nll = nx.scale(ll_total, -1.0 / mc_samples)
    kl = nx.scale(model.kl(), kl_weight * n_batch / dataset_size)
    loss = nx.add(nll, kl)
    return ElboTerms(loss, float(nll.value), float(kl.value), used)


class Adam:
    def __init__(self, params: list[Var], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad * p.grad
            p.value = p.value - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    nll_term: float
    kl_term: float


@dataclass
class TrainResult:
    history: list[EpochMetrics]
    n_train: int
    steps: int


def train(model: BHPeftModel, dataset: Dataset, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Minimise the negative ELBO over all variational parameters and the head.

    Each epoch visits a seeded permutation of the data in minibatches; the
    reported epoch loss, likelihood term and KL term are sums over batches.
    """
    if len(dataset) == 0:
        raise InputError("empty dataset")
    if dataset.task != model.config.task:
        raise ConfigError(f"dataset task {dataset.task!r} != model task {model.config.task!r}")
    dataset.check_fits(model.config.n_max, model.config.vocab)
    shuffle_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    params = model.trainable()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    seqs, targets = dataset.tokens, dataset.targets
    n = len(dataset)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        tot = nll_tot = kl_tot = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            terms = negative_elbo(
                model, [seqs[i] for i in idx], targets[idx], cfg.mc_samples, cfg.kl_weight, n, noise_rng,
                noise_sigma=cfg.noise_sigma, per_example_eps=cfg.per_example_eps,
            )
            value = float(terms.loss.value)
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, b, value)
            nx.backward(terms.loss)
            opt.step()
            tot += value
            nll_tot += terms.nll
            kl_tot += terms.kl
        row = EpochMetrics(epoch, tot, nll_tot, kl_tot)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.zero_grad()
    return TrainResult(history, n, opt.t)
