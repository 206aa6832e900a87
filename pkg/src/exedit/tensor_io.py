"""On-disk tensor container: small JSON header + raw row-major float32 data.

Used for the image-token cache, the inversion cache, and capture-store
spills. Layout: 8-byte magic, u32 header length, UTF-8 JSON header
(``shape``, ``dtype`` plus caller metadata), then the raw buffer.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XTNSR\x00\x00\x01"


def write_tensor(path: str | Path, array: np.ndarray, meta: dict | None = None) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = dict(meta or {})
    header["shape"] = list(arr.shape)
    header["dtype"] = "float32"
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a tensor container: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        data = f.read()
    shape = tuple(header["shape"])
    arr = np.frombuffer(data, dtype=np.float32).reshape(shape).copy()
    meta = {k: v for k, v in header.items() if k not in ("shape", "dtype")}
    return arr, meta
