"""Named-tensor checkpoints: magic, JSON index, little-endian float64 payload.

Layout::

    b"WDACKPT1" | uint64 LE index length | JSON index | raw tensor bytes

The index lists ``name``, ``dtype`` (always ``<f8``), ``shape``, ``offset``
and ``nbytes`` per tensor, plus a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"WDACKPT1"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    index = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(index)))
        fh.write(index)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    index = json.loads(data[16:16 + n])
    base = 16 + n
    out = {}
    for e in index["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        out[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return out, index.get("meta", {})
