"""Flat binary tensor records: magic ``TNSR``, u32 rank, u32 dims, f32 payload (little-endian)."""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"TNSR"


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor record")
    return buf
