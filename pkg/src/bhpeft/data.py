"""Datasets, deterministic synthetic generators and TSV text ingestion.

Token ids below ``RESERVED`` never appear as filler; generators place their
designated tokens (keywords, ambiguity markers, counted tokens) there so
the planted structure is unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError

RESERVED = 16
KEYWORD = 1
PHASE_KEYWORDS = (1, 2, 3, 4)
REGION_TOKENS = (8, 9, 10, 11)
COUNT_TOKEN = 5
GENERATORS = ("keyword", "noisy-region", "phase-shift", "regression-count")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Dataset:
    examples: tuple[tuple[tuple[int, ...], float | int], ...]
    task: str
    vocab: int
    num_classes: int = 2
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.examples) == 0:
            raise InputError("dataset must contain at least one example")
        if self.task == "classification":
            for i, (_, y) in enumerate(self.examples):
                if not 0 <= y < self.num_classes:
                    raise InputError(f"example {i}: class {y} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def tokens(self) -> list[tuple[int, ...]]:
        return [x for x, _ in self.examples]

    @property
    def targets(self) -> np.ndarray:
        return np.array([y for _, y in self.examples])

    def subset(self, indices, **meta) -> "Dataset":
        return Dataset(
            tuple(self.examples[i] for i in indices), self.task, self.vocab, self.num_classes,
            {**self.meta, **meta},
        )

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(self.examples + other.examples, self.task, self.vocab, self.num_classes, dict(self.meta))

    def check_fits(self, n_max: int, vocab: int) -> None:
        for i, (x, _) in enumerate(self.examples):
            if len(x) > n_max:
                raise InputError(f"example {i} has length {len(x)} > n_max={n_max}")
            if max(x) >= vocab:
                raise InputError(f"example {i} has token id >= vocab={vocab}")


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % 2)


def _filler(rng, length: int, vocab: int) -> list[int]:
    return list(rng.integers(RESERVED, vocab, size=length))


def _insert(rng, seq: list[int], token: int) -> None:
    seq[int(rng.integers(len(seq)))] = token


def _keyword_examples(n, rng, vocab, keyword, min_len, max_len):
    labels = _balanced_labels(n, rng)
    out = []
    for y in labels:
        seq = _filler(rng, int(rng.integers(min_len, max_len + 1)), vocab)
        if y:
            _insert(rng, seq, keyword)
        out.append((seq, int(y)))
    return out


def generate(task: str, n: int, seed: int, vocab: int = 512, min_len: int = 8, max_len: int = 16, **params) -> Dataset:
    """Deterministic synthetic dataset.

    keyword
        label 1 iff token ``keyword`` (default 1) occurs.
    noisy-region
        keyword task; a fraction ``region_frac`` (default 0.3) of examples
        carries a marker from ``REGION_TOKENS`` and has its label drawn
        independently of the keyword, i.e. flipped with probability 0.5.
    phase-shift
        keyword task whose keyword is ``PHASE_KEYWORDS[phase - 1]``.
    regression-count
        target = (occurrences of ``COUNT_TOKEN``) / length, in [0, 1].
    """
    if task not in GENERATORS:
        raise ConfigError(f"unknown generator {task!r}; expected one of {GENERATORS}")
    if n < 1:
        raise ConfigError("n must be >= 1")
    if not 1 <= min_len <= max_len:
        raise ConfigError("need 1 <= min_len <= max_len")
    if vocab <= RESERVED:
        raise ConfigError(f"vocab must exceed {RESERVED} reserved ids")
    rng = np.random.default_rng(seed)
    meta = {"generator": task, "seed": int(seed), "n": int(n), **params}

    if task == "keyword":
        keyword = int(params.pop("keyword", KEYWORD))
        _no_extra(params)
        examples = _keyword_examples(n, rng, vocab, keyword, min_len, max_len)
    elif task == "phase-shift":
        phase = int(params.pop("phase", 1))
        _no_extra(params)
        if not 1 <= phase <= len(PHASE_KEYWORDS):
            raise ConfigError(f"phase must be in [1, {len(PHASE_KEYWORDS)}]")
        examples = _keyword_examples(n, rng, vocab, PHASE_KEYWORDS[phase - 1], min_len, max_len)
    elif task == "noisy-region":
        frac = float(params.pop("region_frac", 0.3))
        keyword = int(params.pop("keyword", KEYWORD))
        _no_extra(params)
        if not 0 <= frac <= 1:
            raise ConfigError("region_frac must be in [0, 1]")
        in_region = np.zeros(n, dtype=bool)
        in_region[: int(round(frac * n))] = True
        in_region = rng.permutation(in_region)
        labels = _balanced_labels(n, rng)
        has_kw = labels.copy()
        has_kw[in_region] = _balanced_labels(int(in_region.sum()), rng)
        examples = []
        for y, kw, region in zip(labels, has_kw, in_region):
            seq = _filler(rng, int(rng.integers(min_len, max_len + 1)), vocab)
            if region:
                _insert(rng, seq, int(rng.choice(REGION_TOKENS)))
            if kw:
                pos = [i for i, t in enumerate(seq) if t >= RESERVED]
                seq[int(rng.choice(pos))] = keyword
            examples.append((seq, int(y)))
        meta["region_flags"] = [bool(r) for r in in_region]
    else:
        _no_extra(params)
        examples = []
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            seq = _filler(rng, length, vocab)
            k = int(rng.integers(0, length + 1))
            for i in rng.choice(length, size=k, replace=False):
                seq[int(i)] = COUNT_TOKEN
            examples.append((seq, k / length))
        return Dataset(_freeze(examples), "regression", vocab, 1, meta)

    return Dataset(_freeze(examples), "classification", vocab, 2, meta)


def _no_extra(params: dict) -> None:
    if params:
        raise ConfigError(f"unexpected generator parameters: {sorted(params)}")


def _freeze(examples) -> tuple:
    return tuple((tuple(int(t) for t in x), y) for x, y in examples)


def split(ds: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint (train, eval) partition by a seeded permutation."""
    if not 0 < eval_fraction < 1:
        raise ConfigError("eval_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_eval = max(1, int(round(eval_fraction * len(ds))))
    if n_eval >= len(ds):
        raise ConfigError("split leaves no training examples")
    return ds.subset(sorted(order[n_eval:]), split="train"), ds.subset(sorted(order[:n_eval]), split="eval")


# text ingestion ----------------------------------------------------------------


def fnv1a_64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str, vocab: int, n_max: int) -> tuple[int, ...]:
    return tuple(fnv1a_64(w) % vocab for w in text.lower().split())[:n_max]


def load_text(
    path, task: str = "classification", labels: Sequence[str] | None = None, vocab: int = 512, n_max: int = 32
) -> Dataset:
    """Read ``text<TAB>label`` lines into a hashed-token dataset.

    Classification labels map to their index in ``labels`` (default
    ``"0"``, ``"1"``); regression labels are parsed as floats.
    """
    path = Path(path)
    if task not in ("classification", "regression"):
        raise ConfigError(f"unknown task {task!r}")
    labels = list(labels) if labels is not None else ["0", "1"]
    index = {lab: i for i, lab in enumerate(labels)}
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'text<TAB>label', got {len(parts)} field(s)")
            text, label = parts[0], parts[1].strip()
            toks = tokenize(text, vocab, n_max)
            if not toks:
                raise InputError(f"{path}:{lineno}: empty text")
            if task == "classification":
                if label not in index:
                    raise InputError(f"{path}:{lineno}: unknown label {label!r}; expected one of {labels}")
                y = index[label]
            else:
                try:
                    y = float(label)
                except ValueError:
                    raise InputError(f"{path}:{lineno}: regression label {label!r} is not a number") from None
            examples.append((toks, y))
    if not examples:
        raise InputError(f"{path}: no records")
    return Dataset(
        tuple(examples), task, vocab, len(labels) if task == "classification" else 1,
        {"source": str(path), "labels": labels},
    )


def write_tsv(ds: Dataset, path) -> None:
    """Write a dataset as ``tok<ID> ...<TAB>label`` lines."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for x, y in ds.examples:
            label = str(y) if ds.task == "classification" else repr(float(y))
            fh.write(" ".join(f"tok{t}" for t in x) + "\t" + label + "\n")
