"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"RFLSCMCK"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "shape"}, ...]}
    ...       float32 little-endian arrays, concatenated in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"RFLSCMCK"
VERSION = 1


def save_container(path, meta: dict, arrays) -> None:
    """Write ``(name, array)`` pairs as float32; ``meta`` must be JSON-serializable."""
    entries, blobs = [], []
    for name, arr in arrays:
        a = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path}: not an rflscm checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        offset += 4 * n
    if offset != len(data):
        raise ConfigError(f"{path}: {len(data) - offset} trailing bytes")
    return header["meta"], arrays
