"""Frozen patch-embedding transformer that produces the shallow and deep
encoder feature groups.

Weights are synthesized from a seed (Gaussian; std 0.02 for the blocks and
positional table, ``patch_std`` for the patch projection) and never receive
gradients. Any weight set of matching shapes can be swapped in through the
named tensor table.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockParams, block_forward, group_mean
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    group_split: tuple = ((0, 1), (2, 3))
    pos_embed: bool = True
    seed: int = 0
    patch_std: float = 2.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        groups = tuple(tuple(int(i) for i in g) for g in self.group_split)
        object.__setattr__(self, "group_split", groups)
        if len(groups) != 2 or not all(groups):
            raise ConfigError("group_split needs exactly two non-empty groups")
        flat = [i for g in groups for i in g]
        if len(set(flat)) != len(flat):
            raise ConfigError("group_split groups must be disjoint")
        if any(list(g) != sorted(g) for g in groups) or max(groups[0]) >= min(groups[1]):
            raise ConfigError("group_split groups must be ordered shallow to deep")
        if self.depth and (min(flat) < 0 or max(flat) >= self.depth):
            raise ConfigError(f"group_split indices must lie in [0, {self.depth})")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_tokens(self) -> int:
        rows, cols = self.grid
        return rows * cols


@dataclass
class FeaturePair:
    fe1: Tensor
    fe2: Tensor
    grid: tuple[int, int]


@dataclass
class BackboneWeights:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[BlockParams] = field(default_factory=list)

    @classmethod
    def synthesize(cls, cfg: BackboneConfig, dtype=None) -> BackboneWeights:
        rng = np.random.default_rng(cfg.seed)
        patch_dim = cfg.channels * cfg.patch_size ** 2
        d = cfg.embed_dim
        patch_w = Tensor(rng.normal(0.0, cfg.patch_std, size=(patch_dim, d)), dtype=dtype)
        patch_b = Tensor(np.zeros(d), dtype=dtype)
        pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_tokens, d)), dtype=dtype)
        blocks = [BlockParams.init(rng, d, cfg.mlp_ratio, trainable=False, dtype=dtype)
                  for _ in range(cfg.depth)]
        return cls(patch_w, patch_b, pos, blocks)

    def named(self) -> dict[str, Tensor]:
        table = {"backbone.patch_w": self.patch_w, "backbone.patch_b": self.patch_b,
                 "backbone.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            table.update(blk.named(f"backbone.blocks.{i}"))
        return table

    @classmethod
    def from_named(cls, table: dict[str, Tensor], depth: int) -> BackboneWeights:
        blocks = [BlockParams.from_named(table, f"backbone.blocks.{i}") for i in range(depth)]
        for t in [table["backbone.patch_w"], table["backbone.patch_b"], table["backbone.pos"]]:
            t.requires_grad = False
        for blk in blocks:
            for t in blk.named("").values():
                t.requires_grad = False
        return cls(table["backbone.patch_w"], table["backbone.patch_b"], table["backbone.pos"], blocks)


def content_hash(table: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(table):
        arr = table[name].data
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.dtype.str.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def patchify(x_prior: Tensor, cfg: BackboneConfig, weights: BackboneWeights) -> Tensor:
    """Cut non-overlapping patches in row-major order and project them to D."""
    if x_prior.ndim != 4 or x_prior.shape[2:] != (cfg.image_size, cfg.image_size) \
            or x_prior.shape[1] != cfg.channels:
        raise DimensionError(
            f"patchify expects [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {x_prior.shape}")
    b, c = x_prior.shape[:2]
    p = cfg.patch_size
    g = cfg.image_size // p
    patches = (x_prior.reshape(b, c, g, p, g, p)
               .transpose(0, 2, 4, 1, 3, 5)
               .reshape(b, g * g, c * p * p))
    return patches @ weights.patch_w + weights.patch_b


def encode(tokens: Tensor, cfg: BackboneConfig, weights: BackboneWeights) -> list[Tensor]:
    if tokens.ndim != 3:
        raise DimensionError(f"encode expects [B, N, D], got {tokens.shape}")
    if not weights.blocks:
        return []
    x = tokens + weights.pos if cfg.pos_embed else tokens
    outputs = []
    for blk in weights.blocks:
        x = block_forward(x, blk, cfg.heads)
        outputs.append(x)
    return outputs


def group_features(block_outputs: list[Tensor], cfg: BackboneConfig) -> FeaturePair:
    shallow, deep = cfg.group_split
    if max(deep) >= len(block_outputs):
        raise ConfigError(f"group index {max(deep)} exceeds {len(block_outputs)} block outputs")
    return FeaturePair(fe1=group_mean(block_outputs, shallow),
                       fe2=group_mean(block_outputs, deep), grid=cfg.grid)
