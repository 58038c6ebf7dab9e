"""Versioned single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"SDCKPT\\x00\\x01"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header:
                {"config": {...}, "meta": {...},
                 "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    ...       raw array bytes, C order, offsets relative to the end of the header

dtypes are numpy dtype strings with explicit byte order (e.g. "<f4").
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"SDCKPT\x00\x01"
VERSION = 1


def save_checkpoint(path, arrays: dict, config: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (arrays, config, meta)."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start : start + hlen])
    body = start + hlen
    arrays = {}
    for e in header["tensors"]:
        lo = body + e["offset"]
        buf = data[lo : lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValidationError(f"{path}: truncated tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["config"], header["meta"]
