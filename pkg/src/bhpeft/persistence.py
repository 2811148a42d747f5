"""Binary checkpoint format.

Layout::

    b"BHPEFT01"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON, sorted keys
    arrays                           float64 little-endian, in manifest order

The manifest lists every array as ``{"name", "shape", "count"}`` plus the
model config, seed, round index and provenance. Writing is canonical, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CheckpointError, CheckpointShapeError, TruncationError, VersionError
from .model import AdapterModule, BHPeftModel, BlockWeights, FrozenBackbone, ModelConfig, PrefixModule, TaskHead
from .numerics import Var
from .variational import GaussianParameter, PriorSpec

MAGIC = b"BHPEFT01"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    model: BHPeftModel
    seed: int = 0
    round_index: int = 0
    train_config: dict | None = None
    rng_state: dict | None = None
    provenance: dict = field(default_factory=dict)


def model_arrays(model: BHPeftModel) -> dict[str, np.ndarray]:
    out = dict(model.backbone.arrays())
    for b, pm in enumerate(model.prefixes):
        out[f"block{b}.prefix.pk_input"] = pm.pk_input
        out[f"block{b}.prefix.pv_input"] = pm.pv_input
    params = model.gaussian_params()
    for p in params:
        out[f"{p.name}.mu"] = p.mu.value
        out[f"{p.name}.g"] = p.g.value
    for p in params:
        prior = model.priors[p.name]
        out[f"prior.{p.name}.mu0"] = prior.mu0
        out[f"prior.{p.name}.sigma0"] = prior.sigma0
    out["head.weight"] = model.head.weight.value
    out["head.bias"] = model.head.bias.value
    return out


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Array shapes implied by a config (built from a throwaway model)."""
    probe = BHPeftModel.create(cfg, seed=0)
    return {k: v.shape for k, v in model_arrays(probe).items()}


def model_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> BHPeftModel:
    expected = _expected_shapes(cfg)
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing array {name!r}")
        if arrays[name].shape != shape:
            raise CheckpointShapeError(
                f"array {name!r} has shape {arrays[name].shape}, config implies {shape}"
            )
    extra = set(arrays) - set(expected)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected arrays {sorted(extra)}")

    def blk(i):
        keys = BlockWeights.__dataclass_fields__
        return BlockWeights(**{k: arrays[f"backbone.block{i}.{k}"].copy() for k in keys})

    backbone = FrozenBackbone(
        arrays["backbone.embedding"].copy(), arrays["backbone.positional"].copy(), [blk(i) for i in range(cfg.layers)]
    )

    def gp(name):
        return GaussianParameter.from_arrays(name, arrays[f"{name}.mu"], arrays[f"{name}.g"])

    prefixes, adapters = [], []
    for b in range(cfg.layers):
        prefixes.append(
            PrefixModule(
                arrays[f"block{b}.prefix.pk_input"].copy(), arrays[f"block{b}.prefix.pv_input"].copy(),
                gp(f"block{b}.prefix.down"), gp(f"block{b}.prefix.up"),
            )
        )
        adapters.append(AdapterModule(gp(f"block{b}.adapter.down"), gp(f"block{b}.adapter.up"), float(cfg.scale)))
    head = TaskHead(Var(arrays["head.weight"].copy()), Var(arrays["head.bias"].copy()))
    model = BHPeftModel(cfg, backbone, prefixes, adapters, head)
    model.set_priors(
        {
            p.name: PriorSpec(arrays[f"prior.{p.name}.mu0"].copy(), arrays[f"prior.{p.name}.sigma0"].copy())
            for p in model.gaussian_params()
        }
    )
    return model


def dumps(ckpt: Checkpoint) -> bytes:
    arrays = model_arrays(ckpt.model)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model.config.to_dict(),
        "train_config": ckpt.train_config,
        "seed": int(ckpt.seed),
        "round_index": int(ckpt.round_index),
        "rng_state": ckpt.rng_state,
        "provenance": ckpt.provenance,
        "arrays": [{"name": k, "shape": list(v.shape), "count": int(v.size)} for k, v in arrays.items()],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    return MAGIC + _LEN.pack(len(blob)) + blob + payload


def loads(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC):
        raise TruncationError(f"file too short for magic ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise TruncationError("file truncated inside manifest length")
    (mlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + mlen:
        raise TruncationError(f"file truncated inside manifest ({len(data) - pos} of {mlen} bytes)")
    try:
        manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from None
    pos += mlen
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version!r}, this build reads {FORMAT_VERSION}")
    arrays = {}
    for entry in manifest["arrays"]:
        name, shape, count = entry["name"], tuple(entry["shape"]), int(entry["count"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointShapeError(f"array {name!r}: manifest shape {list(shape)} disagrees with {count} stored values")
        nbytes = 8 * count
        if len(data) < pos + nbytes:
            raise TruncationError(f"file truncated inside array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last array")
    cfg = ModelConfig(**manifest["model_config"])
    return Checkpoint(
        model=model_from_arrays(cfg, arrays),
        seed=manifest["seed"],
        round_index=manifest["round_index"],
        train_config=manifest["train_config"],
        rng_state=manifest["rng_state"],
        provenance=manifest["provenance"],
    )


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
