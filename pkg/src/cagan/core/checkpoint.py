"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"CAGN"  u32 version  u64 count
    count x ( u32 name_len, utf-8 name, u32 rank, u64 dims[rank], f64 data[prod(dims)] )

Entries are written in sorted name order so equal contents give equal bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CAGN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
