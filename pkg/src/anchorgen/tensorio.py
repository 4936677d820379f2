"""Named-tensor container files.

Binary layout (all integers little-endian):

    magic            4 bytes  b"AGT1"
    meta_len         uint64
    meta             meta_len bytes of UTF-8 JSON (caller metadata, may be {})
    n_tensors        uint32
    per tensor, in ascending name order:
        name_len     uint32
        name         name_len bytes UTF-8
        dtype_tag    uint8    (0 = float64)
        ndim         uint32
        dims         ndim * uint64
        data         prod(dims) * 8 bytes of little-endian float64

The sort by name makes the file a deterministic function of its contents.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"AGT1"
DTYPE_F64 = 0


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write named arrays (or Tensors) plus a JSON metadata record."""
    path = Path(path)
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            arr = np.ascontiguousarray(getattr(arr, "data", arr), dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BI", DTYPE_F64, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tensors(path):
    """Read a container; returns (dict name->ndarray, metadata dict)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ParseError(f"{path}: truncated container")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (meta_len,) = struct.unpack("<Q", take(8))
    metadata = json.loads(take(meta_len).decode("utf-8")) if meta_len else {}
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        dtype_tag, ndim = struct.unpack("<BI", take(5))
        if dtype_tag != DTYPE_F64:
            raise ParseError(f"{path}: unsupported dtype tag {dtype_tag}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = np.ascontiguousarray(data, dtype=np.float64)
    if off != len(blob):
        raise ParseError(f"{path}: {len(blob) - off} trailing bytes")
    return tensors, metadata
