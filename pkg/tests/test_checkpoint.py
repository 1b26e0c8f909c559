import base64
import json

import numpy as np
import pytest

from conftest import make_config
from modules.checkpoint import (BackboneSnapshot, load, load_prefix, prefix_from_bytes,
                                prefix_to_bytes, read_digest, save_prefix, snapshot)
from modules.errors import CompatibilityError, DataError
from modules.model import PrefixBank, collapse_prefix_encoder, forward, init_backbone


@pytest.fixture
def backbone():
    return init_backbone(make_config(30), seed=11)


def test_snapshot_round_trip_is_byte_identical(backbone, tmp_path):
    original = snapshot(backbone, provenance="base-pretrained")
    path = original.save(tmp_path / "backbone.json")
    restored = BackboneSnapshot.read(path)
    assert restored.to_bytes() == original.to_bytes()
    assert load(restored).digest() == backbone.digest()
    assert snapshot(load(restored)).to_bytes() == original.to_bytes()


def test_each_load_is_a_fresh_copy(backbone):
    frozen = snapshot(backbone)
    first, second = load(frozen), load(frozen)
    first["lm_head.bias"].data += 1.0
    assert second.digest() == backbone.digest()
    assert frozen.digest() == backbone.digest()


def test_load_checks_the_backbone_fingerprint(backbone):
    frozen = snapshot(backbone)
    with pytest.raises(CompatibilityError):
        load(frozen, make_config(30, d_model=32))
    # prefix length is not part of the backbone shape
    assert load(frozen, make_config(30, prefix_length=9)).config.prefix_length == 9


@pytest.mark.parametrize("reparameterize", [False, True])
def test_prefix_round_trip(tmp_path, reparameterize):
    prefix = PrefixBank.initialize(make_config(30), seed=4, reparameterize=reparameterize)
    path = save_prefix(prefix, tmp_path / "prefix.json", meta={"tasks": ["x"]})
    restored, meta = load_prefix(path)
    assert meta == {"tasks": ["x"]}
    assert restored.reparameterized == reparameterize
    assert restored.digest() == prefix.digest()
    assert prefix_to_bytes(restored, meta=meta) == path.read_bytes()


def test_prefix_file_is_not_a_backbone(tmp_path):
    prefix = PrefixBank.initialize(make_config(30), seed=4)
    with pytest.raises(CompatibilityError):
        BackboneSnapshot.from_bytes(prefix_to_bytes(prefix))


def test_unknown_dtype_is_rejected():
    prefix = PrefixBank.initialize(make_config(30), seed=4)
    document = json.loads(prefix_to_bytes(prefix))
    document["tensors"][0]["dtype"] = "f16"
    with pytest.raises(DataError):
        prefix_from_bytes(json.dumps(document).encode("utf-8"))


def test_read_digest_detects_tampering(backbone, tmp_path):
    path = snapshot(backbone).save(tmp_path / "backbone.json")
    stored, actual = read_digest(path)
    assert stored == actual == backbone.digest()

    document = json.loads(path.read_bytes())
    entry = document["tensors"][-1]
    values = np.zeros(entry["shape"], dtype="<f4") + 0.5
    entry["data"] = base64.b64encode(values.tobytes()).decode("ascii")
    path.write_text(json.dumps(document), encoding="utf-8")
    stored, actual = read_digest(path)
    assert stored != actual


def test_loaded_backbone_gives_the_same_outputs(backbone):
    source = np.array([[5, 6, 7, 8], [9, 10, 0, 0]])
    target = np.array([[1, 12, 13], [1, 14, 2]])
    restored = load(BackboneSnapshot.from_bytes(snapshot(backbone).to_bytes()))
    np.testing.assert_array_equal(forward(restored, None, source, target).data,
                                  forward(backbone, None, source, target).data)


def test_collapsed_prefix_is_smaller_on_disk():
    prefix = PrefixBank.initialize(make_config(30), seed=4, reparameterize=True)
    encoded = prefix_to_bytes(prefix)
    assert collapse_prefix_encoder(prefix) is prefix
    collapsed = prefix_to_bytes(prefix)
    assert len(collapsed) < len(encoded)
    assert collapse_prefix_encoder(prefix) is prefix
    assert prefix_to_bytes(prefix) == collapsed
