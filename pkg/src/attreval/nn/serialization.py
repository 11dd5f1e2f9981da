"""ATEV weight files.

Layout: ``b"ATEV"``, u32 LE version (1), u64 LE header length, UTF-8 JSON
header, then the little-endian float32 blobs of every parameter in layer
order. The header lists each layer's type, config and, per parameter, its
shape and byte offset relative to the start of the blob section.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedFileError, VersionMismatchError
from .layers import LAYER_TYPES
from .model import Model

MAGIC = b"ATEV"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def model_to_bytes(model):
    layers, blobs, offset = [], [], 0
    for layer in model.layers:
        entry = {"type": layer.name, "config": layer.config(), "params": {}}
        for name, value in layer.params().items():
            data = np.ascontiguousarray(value, dtype="<f4").tobytes()
            entry["params"][name] = {"shape": list(value.shape), "offset": offset,
                                     "nbytes": len(data)}
            blobs.append(data)
            offset += len(data)
        layers.append(entry)
    header = {
        "layers": layers,
        "taps": model.taps,
        "head_start": model.head_start,
        "input_shape": list(model.input_shape) if model.input_shape else None,
        "meta": model.meta,
        "blob_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def model_from_bytes(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not an ATEV weight file (bad magic)")
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError("file ends inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"ATEV version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedFileError("file ends inside the JSON header")
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    blob = memoryview(buf)[start + hlen:]
    if len(blob) < header["blob_bytes"]:
        raise TruncatedFileError(
            f"weight blob has {len(blob)} bytes, header declares {header['blob_bytes']}")
    layers = []
    for entry in header["layers"]:
        kwargs = dict(entry["config"])
        for name, info in entry["params"].items():
            raw = blob[info["offset"]:info["offset"] + info["nbytes"]]
            kwargs[name] = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).astype(np.float32)
        layers.append(LAYER_TYPES[entry["type"]](**kwargs))
    shape = header.get("input_shape")
    return Model(layers, header["taps"], header["head_start"], shape, header.get("meta"))


def save_model(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


def model_hash(model):
    """SHA-256 of the serialized model; used as a cache key."""
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
