"""Flat binary weight container with a bit-exact round trip.

Layout: magic "DQW1", u32 version, u32 tensor count; then per tensor a u32
name length, UTF-8 name, u32 rank, u32 dims, and raw little-endian float32
data. Everything little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DQW1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed container or a name/shape mismatch against the model."""


def save_weights(path, tensors: dict[str, np.ndarray]):
    """Write named float32 arrays; insertion order is preserved on disk."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank-0 as rank-0
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    off = 4
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = off + 4 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
        out[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
        off = end
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out
