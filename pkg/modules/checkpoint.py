# ---------------------------------------------------
# checkpoint.py - Backbone Snapshots and Prefix Files
# ---------------------------------------------------
# A module that saves and loads backbones and prefix
# banks as single JSON documents:
#   format_version, kind, config, fingerprint, seed,
#   provenance, meta, digest, tensors
# where every tensor is {name, shape, dtype: "f32",
# data: base64 of little-endian float32}. Writing a
# loaded document again gives identical bytes. A
# snapshot is what "fresh" backbones are spawned from.
# ---------------------------------------------------

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modules.autodiff import DiffTensor, default_dtype
from modules.errors import CompatibilityError, DataError
from modules.model import (Backbone, ModelConfig, PrefixBank, PrefixEncoder,
                           backbone_shapes)
from modules.seeding import array_digest

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def encode_tensor(name, array):
    raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return {"name": name, "shape": list(np.shape(array)), "dtype": "f32",
            "data": base64.b64encode(raw).decode("ascii")}


def decode_tensor(entry):
    if entry.get("dtype") != "f32":
        raise DataError(f"tensor {entry.get('name')!r} has unsupported dtype "
                        f"{entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    array = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    return entry["name"], array.astype(np.float32)


def _dump(document):
    return json.dumps(document, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def _parse(data, kind):
    try:
        document = json.loads(data)
    except (ValueError, UnicodeDecodeError) as e:
        raise DataError(f"checkpoint is not valid JSON: {e}") from e
    if document.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint format "
                                 f"{document.get('format_version')!r}")
    if document.get("kind") != kind:
        raise CompatibilityError(f"expected a {kind} checkpoint, "
                                 f"found {document.get('kind')!r}")
    return document


# -------------------
#  BACKBONE SNAPSHOT
# -------------------
@dataclass
class BackboneSnapshot:
    config: ModelConfig
    tensors: dict
    seed: int = None
    provenance: str = "random-init"
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return self.config.backbone_fingerprint()

    def digest(self):
        return array_digest(self.tensors.items())

    def to_bytes(self):
        document = {"format_version": FORMAT_VERSION, "kind": "backbone",
                    "config": self.config.to_dict(), "fingerprint": self.fingerprint,
                    "seed": self.seed, "provenance": self.provenance,
                    "meta": self.meta, "digest": self.digest(),
                    "tensors": [encode_tensor(name, array)
                                for name, array in self.tensors.items()]}
        return _dump(document)

    @classmethod
    def from_bytes(cls, data):
        document = _parse(data, "backbone")
        config = ModelConfig(**document["config"]).validate()
        if document["fingerprint"] != config.backbone_fingerprint():
            raise CompatibilityError("snapshot fingerprint does not match its config")
        tensors = dict(decode_tensor(entry) for entry in document["tensors"])
        if any(name.startswith("prefix") or name.endswith((".key", ".value"))
               for name in tensors):
            raise CompatibilityError("a backbone snapshot may not hold prefix tensors")
        return cls(config=config, tensors=tensors, seed=document["seed"],
                   provenance=document["provenance"], meta=document.get("meta", {}))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        logger.info("Saved %s backbone snapshot to %s", self.provenance, path)
        return path

    @classmethod
    def read(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def snapshot(backbone, *, provenance=None, meta=None):
    """ Copies every backbone parameter into a BackboneSnapshot. """
    tensors = {name: np.asarray(array, dtype=np.float32).copy()
               for name, array in backbone.named_arrays()}
    return BackboneSnapshot(config=backbone.config, tensors=tensors, seed=backbone.seed,
                            provenance=provenance or backbone.provenance,
                            meta=dict(meta or {}))


def load(snapshot_, config=None):
    """
    Spawns a fresh Backbone from a snapshot. When config is given its
    backbone fingerprint must equal the snapshot's.
    """
    if config is not None and config.backbone_fingerprint() != snapshot_.fingerprint:
        raise CompatibilityError(
            f"snapshot fingerprint {snapshot_.fingerprint} does not match "
            f"config fingerprint {config.backbone_fingerprint()}")
    model_config = snapshot_.config
    if config is not None:
        # Prefix length and dropout are not part of the backbone shape
        model_config = config
    expected = [name for name, _ in backbone_shapes(model_config)]
    if list(snapshot_.tensors) != expected:
        raise CompatibilityError("snapshot tensors do not match the backbone layout")
    params = {name: DiffTensor(snapshot_.tensors[name], requires_grad=True, name=name,
                               dtype=default_dtype())
              for name in expected}
    return Backbone(model_config, params, seed=snapshot_.seed,
                    provenance=snapshot_.provenance)


# -------------------
#  PREFIX FILES
# -------------------
def prefix_to_bytes(prefix, *, meta=None):
    document = {"format_version": FORMAT_VERSION, "kind": "prefix",
                "config": prefix.config.to_dict(),
                "fingerprint": prefix.config.backbone_fingerprint(),
                "seed": prefix.seed, "provenance": prefix.provenance,
                "meta": dict(meta or {}), "digest": prefix.digest(),
                "reparameterized": prefix.reparameterized,
                "tensors": [encode_tensor(name, array)
                            for name, array in prefix.named_arrays()]}
    return _dump(document)


def prefix_from_bytes(data):
    """ Returns (PrefixBank, meta). """
    document = _parse(data, "prefix")
    config = ModelConfig(**document["config"]).validate()
    tensors = dict(decode_tensor(entry) for entry in document["tensors"])

    def leaf(name):
        return DiffTensor(tensors[name], requires_grad=True, name=name,
                          dtype=default_dtype())

    try:
        if document["reparameterized"]:
            encoder = PrefixEncoder({name: leaf(name) for name in tensors})
            prefix = PrefixBank(config, encoder=encoder, seed=document["seed"],
                                provenance=document["provenance"])
        else:
            sites = config.attention_sites()
            prefix = PrefixBank(config,
                                keys={s: leaf(f"{s}.key") for s in sites},
                                values={s: leaf(f"{s}.value") for s in sites},
                                seed=document["seed"], provenance=document["provenance"])
    except KeyError as e:
        raise CompatibilityError(f"prefix checkpoint is missing tensor {e}") from e
    return prefix, document.get("meta", {})


def save_prefix(prefix, path, *, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(prefix_to_bytes(prefix, meta=meta))
    logger.info("Saved prefix bank (L=%d) to %s", prefix.length, path)
    return path


def load_prefix(path):
    return prefix_from_bytes(Path(path).read_bytes())


def read_digest(path):
    """ Stored and recomputed tensor digests of a checkpoint file. """
    document = json.loads(Path(path).read_bytes())
    arrays = [decode_tensor(entry) for entry in document["tensors"]]
    return document.get("digest"), array_digest(arrays)
