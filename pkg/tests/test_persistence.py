import json
import struct

import numpy as np
import pytest

from bhpeft import persistence
from bhpeft.data import generate
from bhpeft.dynamic import chain_prior
from bhpeft.errors import BadMagicError, CheckpointError, CheckpointShapeError, TruncationError, VersionError
from bhpeft.inference import mean_mode_metric
from bhpeft.model import BHPeftModel, ModelConfig, forward
from bhpeft.training import TrainConfig, train

CFG = ModelConfig(d=8, heads=2, layers=2, vocab=64, n_max=16, prefix_len=2, r_a=2, r_p=3)


@pytest.fixture(scope="module")
def blob():
    model = BHPeftModel.create(CFG, seed=3)
    train(model, generate("keyword", 24, 0, vocab=64), TrainConfig(epochs=2, batch_size=8))
    chain_prior(model)
    ckpt = persistence.Checkpoint(model, seed=3, round_index=2, train_config=TrainConfig().to_dict(),
                                  rng_state={"seed": 3}, provenance={"command": ["train"], "config_digest": "x"})
    return persistence.dumps(ckpt)


def _split(blob):
    (n,) = struct.unpack_from("<Q", blob, 8)
    return json.loads(blob[16 : 16 + n]), blob[16 + n :]


def _rebuild(manifest, payload):
    m = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return persistence.MAGIC + struct.pack("<Q", len(m)) + m + payload


def test_layout(blob):
    assert blob[:8] == b"BHPEFT01"
    manifest, payload = _split(blob)
    assert manifest["format_version"] == persistence.FORMAT_VERSION
    assert len(payload) == 8 * sum(a["count"] for a in manifest["arrays"])
    names = [a["name"] for a in manifest["arrays"]]
    assert "backbone.embedding" in names and "prior.block1.adapter.up.sigma0" in names
    assert manifest["round_index"] == 2 and manifest["provenance"]["command"] == ["train"]


def test_round_trip_byte_identical(blob):
    again = persistence.dumps(persistence.loads(blob))
    assert again == blob


def test_round_trip_preserves_model(blob, tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(blob)
    ckpt = persistence.load(path)
    persistence.save(ckpt, tmp_path / "n.bin")
    assert (tmp_path / "n.bin").read_bytes() == blob
    other = persistence.loads(blob)
    toks = [20, 21, 22]
    assert np.array_equal(forward(ckpt.model, toks), forward(other.model, toks))
    assert ckpt.model.backbone.digest() == other.model.backbone.digest()
    assert float(ckpt.model.kl().value) == pytest.approx(0.0, abs=1e-9)


def test_reload_reproduces_mean_mode_predictions():
    model = BHPeftModel.create(CFG, seed=5)
    ds = generate("keyword", 24, 1, vocab=64)
    train(model, ds, TrainConfig(epochs=1, batch_size=8))
    loaded = persistence.loads(persistence.dumps(persistence.Checkpoint(model))).model
    for x in ds.tokens:
        assert np.array_equal(forward(model, x), forward(loaded, x))
    assert mean_mode_metric(model, ds) == mean_mode_metric(loaded, ds)


def test_bad_magic(blob):
    with pytest.raises(BadMagicError):
        persistence.loads(b"NOTMAGIC" + blob[8:])


def test_version_mismatch(blob):
    manifest, payload = _split(blob)
    manifest["format_version"] = 99
    with pytest.raises(VersionError):
        persistence.loads(_rebuild(manifest, payload))


@pytest.mark.parametrize("keep", [0, 4, 12, 40, -8, -1])
def test_truncation(blob, keep):
    n = keep if keep >= 0 else len(blob) + keep
    with pytest.raises(TruncationError):
        persistence.loads(blob[:n])


def test_trailing_bytes(blob):
    with pytest.raises(CheckpointError):
        persistence.loads(blob + b"\0" * 8)


def test_shape_count_disagreement_names_array(blob):
    manifest, payload = _split(blob)
    entry = next(a for a in manifest["arrays"] if a["name"] == "block0.adapter.down.mu")
    entry["shape"] = [entry["shape"][0], entry["shape"][1] + 1]
    with pytest.raises(CheckpointShapeError, match="block0.adapter.down.mu"):
        persistence.loads(_rebuild(manifest, payload))


def test_shape_config_disagreement_names_array(blob):
    manifest, payload = _split(blob)
    entry = next(a for a in manifest["arrays"] if a["name"] == "head.weight")
    entry["shape"] = entry["shape"][::-1]
    with pytest.raises(CheckpointShapeError, match="head.weight"):
        persistence.loads(_rebuild(manifest, payload))


def test_garbage_manifest(blob):
    bad = persistence.MAGIC + struct.pack("<Q", 3) + b"{x}"
    with pytest.raises(CheckpointError):
        persistence.loads(bad)
