"""TNSR binary tensor container.

Layout: magic ``TNSR``, little-endian u32 ``ndim``, ``ndim`` little-endian
u32 extents, then the row-major payload as little-endian float32.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"


def encode(array) -> bytes:
    a = np.asarray(array)
    header = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad TNSR magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError("truncated TNSR header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    end = 8 + 4 * ndim
    if len(blob) < end:
        raise FormatError("truncated TNSR shape")
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != end + 4 * count:
        raise FormatError(f"TNSR payload has {len(blob) - end} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(shape)


def save(array, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
