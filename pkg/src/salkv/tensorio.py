"""PFKV tensor files.

Layout (all little-endian)::

    b"PFKV" | u32 version=1 | u32 ndim | ndim x u32 dims | float32 payload (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PFKV"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_tensor(tensor) -> bytes:
    arr = np.asarray(tensor, dtype="<f4", order="C")
    header = MAGIC + _U32.pack(VERSION) + _U32.pack(arr.ndim)
    header += b"".join(_U32.pack(d) for d in arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, expected b'PFKV'", 0)
    if len(data) < 12:
        raise FormatError("truncated header", len(data))
    (version,) = _U32.unpack_from(data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (ndim,) = _U32.unpack_from(data, 8)
    offset = 12
    if len(data) < offset + 4 * ndim:
        raise FormatError(f"truncated dims for ndim={ndim}", len(data))
    dims = struct.unpack_from(f"<{ndim}I", data, offset)
    offset += 4 * ndim
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    payload = len(data) - offset
    if payload < expected:
        raise FormatError(f"truncated payload: {payload} of {expected} bytes", len(data))
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", offset + expected)
    return np.frombuffer(data, dtype="<f4", offset=offset, count=expected // 4).reshape(dims).astype(np.float32)


def write_tensor(path, tensor):
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
