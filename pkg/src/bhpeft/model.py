"""Frozen miniature transformer with Bayesian prefix-tuning and a Bayesian
scaled parallel adapter in every block, plus a deterministic task head.

Row-vector convention throughout: activations are ``[batch, n, d]`` and a
linear map is ``x @ W``. Prefix vectors are generated as
``tanh(P' @ W_down) @ W_up`` from fixed inputs ``P'``.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .numerics import Var
from .variational import (
    DEFAULT_DELTA,
    PRIOR_MU,
    PRIOR_SIGMA,
    GaussianParameter,
    PriorSpec,
    init_gaussian_param,
    kl_to_prior,
    sample,
)

MASK_FILL = -1e30
TASKS = ("classification", "regression")


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    layers: int = 2
    n_max: int = 32
    vocab: int = 512
    prefix_len: int = 4
    r_p: int = 8
    r_a: int = 8
    scale: float = 4.0
    task: str = "classification"
    num_classes: int = 2
    d_ff: int = 0  # 0 -> 4 * d
    delta: float = DEFAULT_DELTA
    prior_mu: float = PRIOR_MU
    prior_sigma: float = PRIOR_SIGMA
    ln_eps: float = nx.LAYER_NORM_EPS

    def __post_init__(self):
        checks = [
            (self.d >= 1, "d must be >= 1"),
            (self.heads >= 1 and self.d % self.heads == 0, f"d={self.d} must be divisible by heads={self.heads}"),
            (self.layers >= 1, "layers must be >= 1"),
            (self.n_max >= 1, "n_max must be >= 1"),
            (self.vocab >= 2, "vocab must be >= 2"),
            (self.prefix_len >= 0, "prefix_len must be >= 0"),
            (self.r_p >= 1, "r_p must be >= 1"),
            (self.r_a >= 1, "r_a must be >= 1"),
            (self.scale >= 0, "scale must be >= 0"),
            (self.task in TASKS, f"task must be one of {TASKS}"),
            (self.task == "regression" or self.num_classes >= 2, "num_classes must be >= 2"),
            (self.d_ff >= 0, "d_ff must be >= 0"),
            (self.delta > 0, "delta must be > 0"),
            (self.prior_sigma > 0, "prior_sigma must be > 0"),
            (self.ln_eps > 0, "ln_eps must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(n_max: int, d: int) -> np.ndarray:
    pos = np.arange(n_max)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(d) // 2)) / d)
    angles = pos * rates[None, :]
    table = np.where(np.arange(d) % 2 == 0, np.sin(angles), np.cos(angles))
    return table


@dataclass
class BlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class FrozenBackbone:
    embedding: np.ndarray
    positional: np.ndarray
    blocks: list[BlockWeights]

    def __post_init__(self):
        for arr in self.arrays().values():
            arr.flags.writeable = False

    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator) -> "FrozenBackbone":
        d, f = cfg.d, cfg.ff_dim
        blocks = []
        for _ in range(cfg.layers):
            blocks.append(
                BlockWeights(
                    wq=rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                    wk=rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                    wv=rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                    wo=rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)),
                    w1=rng.normal(0.0, 1.0 / math.sqrt(d), (d, f)),
                    b1=np.zeros(f),
                    w2=rng.normal(0.0, 1.0 / math.sqrt(f), (f, d)),
                    b2=np.zeros(d),
                    ln1_gamma=np.ones(d),
                    ln1_beta=np.zeros(d),
                    ln2_gamma=np.ones(d),
                    ln2_beta=np.zeros(d),
                )
            )
        return cls(rng.normal(0.0, 1.0, (cfg.vocab, d)), sinusoidal_positions(cfg.n_max, d), blocks)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"backbone.embedding": self.embedding, "backbone.positional": self.positional}
        for i, blk in enumerate(self.blocks):
            for key, arr in vars(blk).items():
                out[f"backbone.block{i}.{key}"] = arr
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class PrefixModule:
    pk_input: np.ndarray  # [l, d], fixed
    pv_input: np.ndarray
    down: GaussianParameter  # [d, r_p]
    up: GaussianParameter  # [r_p, d]


@dataclass
class AdapterModule:
    down: GaussianParameter  # [d, r_a]
    up: GaussianParameter  # [r_a, d]
    scale: float


@dataclass
class TaskHead:
    weight: Var
    bias: Var

    def __post_init__(self):
        self.weight.requires_grad = True
        self.bias.requires_grad = True
        self.weight.name, self.bias.name = "head.weight", "head.bias"


@dataclass
class BHPeftModel:
    config: ModelConfig
    backbone: FrozenBackbone
    prefixes: list[PrefixModule]
    adapters: list[AdapterModule]
    head: TaskHead
    priors: dict[str, PriorSpec] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "BHPeftModel":
        backbone_seq, peft_seq, head_seq = np.random.SeedSequence(seed).spawn(3)
        backbone = FrozenBackbone.create(cfg, np.random.default_rng(backbone_seq))
        rng = np.random.default_rng(peft_seq)
        d = cfg.d
        prefixes, adapters = [], []
        for b in range(cfg.layers):
            prefixes.append(
                PrefixModule(
                    pk_input=rng.standard_normal((cfg.prefix_len, d)),
                    pv_input=rng.standard_normal((cfg.prefix_len, d)),
                    down=init_gaussian_param(f"block{b}.prefix.down", (d, cfg.r_p), d, cfg.delta, rng),
                    up=init_gaussian_param(f"block{b}.prefix.up", (cfg.r_p, d), d, cfg.delta, rng),
                )
            )
            adapters.append(
                AdapterModule(
                    down=init_gaussian_param(f"block{b}.adapter.down", (d, cfg.r_a), d, cfg.delta, rng),
                    up=init_gaussian_param(f"block{b}.adapter.up", (cfg.r_a, d), d, cfg.delta, rng),
                    scale=float(cfg.scale),
                )
            )
        head_rng = np.random.default_rng(head_seq)
        bound = math.sqrt(6.0 / (d + cfg.out_dim))
        head = TaskHead(Var(head_rng.uniform(-bound, bound, (d, cfg.out_dim))), Var(np.zeros(cfg.out_dim)))
        model = cls(cfg, backbone, prefixes, adapters, head)
        model.reset_priors()
        return model

    # parameter bookkeeping ---------------------------------------------------

    def gaussian_params(self) -> list[GaussianParameter]:
        out = []
        for pm, am in zip(self.prefixes, self.adapters):
            out += [pm.down, pm.up, am.down, am.up]
        return out

    def trainable(self) -> list[Var]:
        leaves = []
        for p in self.gaussian_params():
            leaves += p.leaves()
        return leaves + [self.head.weight, self.head.bias]

    def zero_grad(self) -> None:
        for v in self.trainable():
            v.zero_grad()

    def reset_priors(self) -> None:
        cfg = self.config
        self.priors = {
            p.name: PriorSpec.constant(p.shape, cfg.prior_mu, cfg.prior_sigma) for p in self.gaussian_params()
        }

    def set_priors(self, priors: dict[str, PriorSpec]) -> None:
        names = [p.name for p in self.gaussian_params()]
        missing = set(names) - set(priors)
        if missing:
            raise ConfigError(f"priors missing for {sorted(missing)}")
        self.priors = {n: priors[n] for n in names}

    def kl(self) -> Var:
        """Total KL of every Gaussian parameter to its attached prior."""
        total = None
        for p in self.gaussian_params():
            term = kl_to_prior(p, self.priors[p.name])
            total = term if total is None else nx.add(total, term)
        return total

    def clone(self) -> "BHPeftModel":
        """Copy of the trainable state; the read-only backbone is shared."""
        backbone = self.backbone
        self.backbone = None
        try:
            dup = copy.deepcopy(self)
        finally:
            self.backbone = backbone
        dup.backbone = backbone
        return dup

    def draw(self, mode: str = "mean", rng: np.random.Generator | None = None, eps: dict | None = None):
        """Weights for one forward pass.

        ``mode="mean"`` uses every mu directly; ``mode="sample"`` draws
        ``mu + g**2 * eps`` once per parameter (or replays ``eps``).
        Returns ``(weights, eps)`` keyed by parameter name.
        """
        weights, used = {}, {}
        for p in self.gaussian_params():
            if mode == "mean":
                weights[p.name] = p.mu
            elif mode == "sample":
                weights[p.name], used[p.name] = sample(p, rng, None if eps is None else eps[p.name])
            else:
                raise ConfigError(f"unknown forward mode {mode!r}")
        return weights, used


# forward pass ----------------------------------------------------------------


def pad_batch(seqs, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences to a rectangle; returns (ids, valid mask)."""
    if len(seqs) == 0:
        raise InputError("empty batch")
    n = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise InputError(f"sequence {i} is empty")
        if len(s) > cfg.n_max:
            raise InputError(f"sequence {i} has length {len(s)} > n_max={cfg.n_max}")
        arr = np.asarray(s, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= cfg.vocab:
            raise InputError(f"sequence {i} has token id outside [0, {cfg.vocab})")
        ids[i, : len(s)] = arr
        mask[i, : len(s)] = True
    return ids, mask


def embed(backbone: FrozenBackbone, ids: np.ndarray) -> np.ndarray:
    return backbone.embedding[ids] + backbone.positional[: ids.shape[1]][None, :, :]


def generate_prefixes(pm: PrefixModule, down, up) -> tuple[Var, Var]:
    """Key and value prefixes ``tanh(P' @ down) @ up``, each ``[l, d]``."""
    p_k = nx.matmul(nx.tanh(nx.matmul(pm.pk_input, down)), up)
    p_v = nx.matmul(nx.tanh(nx.matmul(pm.pv_input, down)), up)
    return p_k, p_v


def _split_heads(t: Var, heads: int) -> Var:
    b, n, d = t.shape
    return nx.transpose(nx.reshape(t, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _key_bias(mask: np.ndarray | None, prefix_len: int) -> np.ndarray | None:
    if mask is None or mask.all():
        return None
    bias = np.where(mask, 0.0, MASK_FILL)
    if prefix_len:
        bias = np.concatenate([np.zeros((mask.shape[0], prefix_len)), bias], axis=1)
    return bias[:, None, None, :]


def prefixed_attention(x_in, blk: BlockWeights, heads: int, p_k=None, p_v=None, mask=None, return_weights=False):
    """Multi-head self-attention whose keys/values are prefixed by ``p_k``/``p_v``.

    With no prefix (or ``l = 0``) this is standard scaled dot-product attention.
    """
    x_in = nx.as_var(x_in)
    b, n, d = x_in.shape
    dk = d // heads
    q = _split_heads(nx.matmul(x_in, blk.wq), heads)
    k = _split_heads(nx.matmul(x_in, blk.wk), heads)
    v = _split_heads(nx.matmul(x_in, blk.wv), heads)
    l = 0 if p_k is None else p_k.shape[0]
    if l:
        def heads_of(p):
            return nx.broadcast_to(nx.transpose(nx.reshape(p, (l, heads, dk)), (1, 0, 2)), (b, heads, l, dk))

        k = nx.concat([heads_of(p_k), k], axis=2)
        v = nx.concat([heads_of(p_v), v], axis=2)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    bias = _key_bias(mask, l)
    if bias is not None:
        scores = nx.add(scores, bias)
    weights = nx.softmax(scores, axis=-1)
    merged = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    out = nx.matmul(merged, blk.wo)
    return (out, weights.value) if return_weights else out


def adapter_block_tail(x_rc, blk: BlockWeights, down=None, up=None, s: float = 0.0, eps: float = nx.LAYER_NORM_EPS):
    """LayerNorm(x_rc + FFN(x_rc) + s * relu(x_rc @ down) @ up)."""
    x_rc = nx.as_var(x_rc)
    hidden = nx.relu(nx.add(nx.matmul(x_rc, blk.w1), blk.b1))
    ffn = nx.add(nx.matmul(hidden, blk.w2), blk.b2)
    z = nx.add(x_rc, ffn)
    if down is not None:
        z = nx.add(z, nx.scale(nx.matmul(nx.relu(nx.matmul(x_rc, down)), up), s))
    return nx.layer_norm(z, blk.ln2_gamma, blk.ln2_beta, eps)


def _pool(x: Var, mask: np.ndarray) -> Var:
    m = mask[:, :, None].astype(np.float64)
    inv_count = 1.0 / mask.sum(axis=1, keepdims=True)
    return nx.mul(nx.sum_axis(nx.mul(x, m), axis=1), inv_count)


def forward_batch(model: BHPeftModel, seqs, weights: dict[str, Var]) -> Var:
    """Outputs ``[batch, out]`` for a list of token sequences under fixed weights."""
    cfg = model.config
    ids, mask = pad_batch(seqs, cfg)
    x = nx.as_var(embed(model.backbone, ids))
    for blk, pm, am in zip(model.backbone.blocks, model.prefixes, model.adapters):
        p_k = p_v = None
        if cfg.prefix_len:
            p_k, p_v = generate_prefixes(pm, weights[pm.down.name], weights[pm.up.name])
        attn = prefixed_attention(x, blk, cfg.heads, p_k, p_v, mask)
        x_rc = nx.layer_norm(nx.add(x, attn), blk.ln1_gamma, blk.ln1_beta, cfg.ln_eps)
        x = adapter_block_tail(x_rc, blk, weights[am.down.name], weights[am.up.name], am.scale, cfg.ln_eps)
    pooled = _pool(x, mask)
    return nx.add(nx.matmul(pooled, model.head.weight), model.head.bias)


def plain_forward(model: BHPeftModel, seqs) -> Var:
    """The frozen transformer and task head alone, with no PEFT modules."""
    cfg = model.config
    ids, mask = pad_batch(seqs, cfg)
    x = nx.as_var(embed(model.backbone, ids))
    for blk in model.backbone.blocks:
        attn = prefixed_attention(x, blk, cfg.heads, mask=mask)
        x_rc = nx.layer_norm(nx.add(x, attn), blk.ln1_gamma, blk.ln1_beta, cfg.ln_eps)
        x = adapter_block_tail(x_rc, blk, eps=cfg.ln_eps)
    pooled = _pool(x, mask)
    return nx.add(nx.matmul(pooled, model.head.weight), model.head.bias)


def forward(model: BHPeftModel, tokens, mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
    """Output for one token sequence: logits ``[C]`` or a length-1 regression output."""
    with nx.no_grad():
        weights, _ = model.draw(mode, rng)
        return forward_batch(model, [list(tokens)], weights).value[0]
