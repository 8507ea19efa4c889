"""VXF1 tensor container: a tiny binary format for dense f64 arrays.

Layout, all little-endian:

    magic   4 bytes  b"VXF1"
    rank    u32
    dims    rank * u64
    data    prod(dims) * f64, row-major (C order)

Round-trips are bit-exact; the reader validates magic, rank, and payload
size and refuses anything that does not match.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"VXF1"
MAX_RANK = 16


def write_vxf(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise ContractError(f"VXF1 stores arrays of rank 1..{MAX_RANK}, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_vxf(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a VXF1 file (bad magic)")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank == 0 or rank > MAX_RANK:
        raise ContractError(f"{path}: unsupported rank {rank}")
    header_end = 8 + 8 * rank
    if len(raw) < header_end:
        raise ContractError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    count = 1
    for d in dims:
        count *= d
    expected = header_end + 8 * count
    if len(raw) != expected:
        raise ContractError(
            f"{path}: payload size mismatch, expected {expected} bytes got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=header_end)
    return data.reshape(dims).astype(np.float64, copy=True)
