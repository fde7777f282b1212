"""Flat binary container of named float64 arrays.

Layout (all integers little-endian)::

    8 bytes   magic b"LVICLSNP"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header {"arrays": [{"name", "shape", "offset"}], "meta": {...}}
    ...       raw float64 data (little-endian), arrays back to back

``offset`` counts bytes from the start of the data section. Weight
snapshots, context-vector caches and model bundles all use this format.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"LVICLSNP"
_LE_F64 = np.dtype("<f8")


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blob = data.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a snapshot container (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    body = memoryview(raw)[16 + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(body):
            raise DataError(f"{path}: array {entry['name']!r} truncated")
        arrays[entry["name"]] = np.frombuffer(body[start:end], dtype=_LE_F64).astype(np.float64).reshape(shape)
    return arrays, header["meta"]


def content_hash(arrays: Mapping[str, np.ndarray]) -> str:
    """sha256 over names, shapes and little-endian bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype=_LE_F64)
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(data.shape)).encode("ascii"))
        h.update(data.tobytes())
    return h.hexdigest()
