"""Binary tensor dump format.

Layout (little endian): b"MVTN", u32 version (1), u32 rank, u64 dims[rank],
u8 dtype (0 = float32, 1 = float64), then the row-major payload.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import StorageError, ValidationError
from .tensor import Tensor

MAGIC = b"MVTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _CODES:
        raise ValidationError(f"cannot dump dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<B", code)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def read_from(stream) -> np.ndarray:
    def take(n):
        chunk = stream.read(n)
        if len(chunk) != n:
            raise ValidationError("truncated tensor dump")
        return chunk

    magic = take(4)
    if magic != MAGIC:
        raise ValidationError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValidationError(f"unsupported tensor dump version {version}")
    dims = struct.unpack(f"<{rank}Q", take(8 * rank))
    (code,) = struct.unpack("<B", take(1))
    if code not in _DTYPES:
        raise ValidationError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = take(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def loads(blob: bytes) -> np.ndarray:
    return read_from(io.BytesIO(blob))


def save(path, x) -> None:
    try:
        Path(path).write_bytes(dumps(x))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return loads(blob)
