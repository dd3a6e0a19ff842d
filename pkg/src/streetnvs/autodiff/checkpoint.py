"""Parameter checkpoint file: named float32 tensors in a flat binary layout.

Layout: magic "EDUSCKPT", u32 version, then per tensor (sorted by name):
u32 name length, name bytes, u32 rank, u32 extents, float32 little-endian
values.  Read until EOF.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EDUSCKPT"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")  # tobytes() gives C order
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        out[name] = arr.reshape(shape).copy()
    return out
