# ---------------------------------------------------
# seeding.py - Named Random Streams and Fingerprints
# ---------------------------------------------------
# Every consumer of randomness asks for its own named
# stream derived from the run seed, so that adding a
# new consumer never shifts the draws of another one.
# Fingerprints are short stable hashes of canonical
# JSON used to tie artifacts to their configuration.
# ---------------------------------------------------

import hashlib
import json
import zlib

import numpy as np


def stream(seed, *names):
    """ Returns a numpy Generator derived from the seed and the stream names. """
    keys = [int(seed) & 0xFFFFFFFF]
    keys.extend(zlib.crc32(str(name).encode("utf-8")) for name in names)
    return np.random.default_rng(np.random.SeedSequence(keys))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True)


def fingerprint(obj, *, length=16):
    """ Stable short hash of any JSON-serializable object. """
    digest = hashlib.sha256(canonical_json(obj).encode("utf-8"))
    return digest.hexdigest()[:length]


def array_digest(named_arrays):
    """
    Hash of an ordered collection of (name, array) pairs. Arrays are
    hashed as little-endian 32-bit floats, the checkpoint storage type.
    """
    digest = hashlib.sha256()
    for name, array in named_arrays:
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(np.shape(array))).encode("ascii"))
        digest.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return digest.hexdigest()
