"""BSDT tensor file format.

Layout: magic 'BSDT' (0x42 0x53 0x44 0x54), u8 version=1, u8 rank, then
rank little-endian u32 extents, then the float64 payload little-endian in
row-major order. Used by scene files, checkpoints and feature dumps.
"""

import struct

import numpy as np

MAGIC = b"BSDT"
VERSION = 1


def pack(arr):
    """Serialize an array to BSDT bytes."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"BSDT rank must be in [1, 255], got {arr.ndim}")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def unpack_from(buf, offset=0, source="<bytes>"):
    """Parse one BSDT block at `offset`; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError(f"{source}: bad BSDT magic at offset {offset}")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise ValueError(f"{source}: unsupported BSDT version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 6)
    start = offset + 6 + 4 * rank
    n = int(np.prod(shape))
    end = start + 8 * n
    if end > len(buf):
        raise ValueError(f"{source}: truncated BSDT payload (need {end} bytes, have {len(buf)})")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape)
    return arr.astype(np.float64), end


def write(path, arr):
    with open(path, "wb") as f:
        f.write(pack(arr))


def read(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = unpack_from(buf, 0, source=str(path))
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after BSDT payload")
    return arr
