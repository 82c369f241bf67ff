"""Flat binary parameter checkpoints: magic MBWT, version 1.

Layout: magic, u32 version, u32 tensor count, then per tensor (sorted by
name): u16 name length, name bytes (utf-8), u8 rank, u32 dims, f32 data
little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

from .engine import Tensor

__all__ = ["CHECKPOINT_MAGIC", "save_params", "load_params"]

CHECKPOINT_MAGIC = b"MBWT"


def save_params(params: dict[str, Tensor], path) -> None:
    chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, 1, len(params))]
    for name in sorted(params):
        data = params[name].data.astype("<f4", copy=False)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:32]}...")
        if data.ndim > 0xFF:
            raise ValueError(f"rank {data.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_params(path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = struct.calcsize("<4sII")
    magic, version, count = struct.unpack_from("<4sII", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if off != len(raw):
        raise ValueError("trailing bytes after last tensor record")
    return params
