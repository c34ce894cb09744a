"""Checkpoint container.

Layout (little endian)::

    b"MVMC"  u32 version
    u32 n    config JSON (n bytes, sorted keys)
    u64      iteration
    u32 n    RNG state JSON (n bytes)
    u32      tensor count
    repeated, sorted by name:
        u32 n  name (utf-8)
        u64 n  MVTN tensor dump
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mvtn
from .errors import StorageError, ValidationError

MAGIC = b"MVMC"
VERSION = 1


def _json(blob: bytes, source: str):
    try:
        return json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{source}: corrupt checkpoint metadata: {exc}") from exc


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC + struct.pack("<I", VERSION))
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        buf.write(struct.pack("<I", len(cfg)) + cfg)
        buf.write(struct.pack("<Q", self.iteration))
        rng = json.dumps(self.rng_state, sort_keys=True, separators=(",", ":")).encode()
        buf.write(struct.pack("<I", len(rng)) + rng)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            key = name.encode()
            blob = mvtn.dumps(self.tensors[name])
            buf.write(struct.pack("<I", len(key)) + key)
            buf.write(struct.pack("<Q", len(blob)) + blob)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> Checkpoint:
        stream = io.BytesIO(blob)

        def take(n):
            chunk = stream.read(n)
            if len(chunk) != n:
                raise ValidationError(f"{source}: truncated checkpoint")
            return chunk

        if take(4) != MAGIC:
            raise ValidationError(f"{source}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise ValidationError(f"{source}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", take(4))
        config = _json(take(n), source)
        (iteration,) = struct.unpack("<Q", take(8))
        (n,) = struct.unpack("<I", take(4))
        rng_state = _json(take(n), source)
        (count,) = struct.unpack("<I", take(4))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode()
            (n,) = struct.unpack("<Q", take(8))
            try:
                tensors[name] = mvtn.loads(take(n))
            except ValidationError as exc:
                raise ValidationError(f"{source}: tensor {name}: {exc}") from exc
        return cls(config=config, tensors=tensors, iteration=iteration, rng_state=rng_state)

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> Checkpoint:
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(blob, str(path))
