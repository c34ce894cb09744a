"""Binary netpbm I/O: P5 (gray) and P6 (RGB), 8- or 16-bit."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import StorageError, ValidationError


def _header(blob: bytes, source: str) -> tuple[list[bytes], int]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(blob):
            raise ValidationError(f"{source}: truncated netpbm header")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise ValidationError(f"{source}: truncated netpbm header")
            pos = end + 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            fields.append(blob[start:pos])
    return fields, pos


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in (np.uint8, np.uint16):
        raise ValidationError(f"netpbm needs uint8 or uint16 data, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValidationError(f"netpbm needs HxW or HxWx3 data, got {arr.shape}")
    maxval = 255 if arr.dtype == np.uint8 else 65535
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + np.ascontiguousarray(arr, dtype=">u2" if maxval > 255 else np.uint8).tobytes()


def decode(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    fields, pos = _header(blob, source)
    try:
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise ValidationError(f"{source}: malformed netpbm header") from None
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"{source}: unsupported netpbm type {magic!r}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = w * h * channels
    payload = blob[pos: pos + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise ValidationError(f"{source}: truncated netpbm payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write(path, arr: np.ndarray) -> None:
    try:
        Path(path).write_bytes(encode(arr))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return decode(blob, str(path))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32) / np.float32(255.0)


def write_heatmap(path, amap: np.ndarray) -> dict:
    """16-bit min-max scaled heatmap plus a JSON sidecar holding the scale."""
    amap = np.asarray(amap, dtype=np.float64)
    lo, hi = float(amap.min()), float(amap.max())
    span = hi - lo
    levels = 65535
    q = np.zeros(amap.shape, dtype=np.uint16) if span == 0 else \
        np.rint((amap - lo) / span * levels).astype(np.uint16)
    write(path, q)
    sidecar = {"min": lo, "max": hi, "levels": levels}
    side_path = Path(path).with_suffix(".json")
    try:
        side_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {side_path}: {exc}") from exc
    return sidecar


def read_heatmap(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Return (raw 16-bit levels, dequantized map, sidecar)."""
    raw = read(path)
    side_path = Path(path).with_suffix(".json")
    try:
        sidecar = json.loads(side_path.read_text())
    except OSError as exc:
        raise StorageError(f"cannot read {side_path}: {exc}") from exc
    span = sidecar["max"] - sidecar["min"]
    values = sidecar["min"] + raw.astype(np.float64) * (span / sidecar["levels"])
    return raw, values, sidecar
