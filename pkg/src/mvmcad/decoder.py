"""Trainable transformer decoder that reconstructs encoder features from the
amplified bottleneck. The first half of its blocks forms the shallow output
``f1``, the second half the deep output ``f2``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockParams, block_forward, group_mean
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class DecoderParams:
    blocks: list[BlockParams]
    heads: int

    def __post_init__(self):
        if len(self.blocks) < 2 or len(self.blocks) % 2:
            raise ConfigError(f"decoder depth must be even and >= 2, got {len(self.blocks)}")

    @property
    def dim(self) -> int:
        return self.blocks[0].wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, depth: int, heads: int,
             mlp_ratio: int, dtype=None) -> DecoderParams:
        blocks = [BlockParams.init(rng, dim, mlp_ratio, trainable=True, dtype=dtype) for _ in range(depth)]
        return cls(blocks=blocks, heads=heads)

    def named(self) -> dict[str, Tensor]:
        table = {}
        for i, blk in enumerate(self.blocks):
            table.update(blk.named(f"decoder.blocks.{i}"))
        return table

    @classmethod
    def from_named(cls, table: dict[str, Tensor], depth: int, heads: int) -> DecoderParams:
        return cls([BlockParams.from_named(table, f"decoder.blocks.{i}") for i in range(depth)], heads)


def decode(f_m: Tensor, params: DecoderParams) -> tuple[Tensor, Tensor]:
    if f_m.ndim != 3 or f_m.shape[-1] != params.dim:
        raise DimensionError(f"decoder expects [B, N, {params.dim}], got {f_m.shape}")
    outputs = []
    x = f_m
    for blk in params.blocks:
        x = block_forward(x, blk, params.heads)
        outputs.append(x)
    half = len(outputs) // 2
    return group_mean(outputs, range(half)), group_mean(outputs, range(half, len(outputs)))
