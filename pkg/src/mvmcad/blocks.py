"""Pre-norm transformer block shared by the frozen backbone and the decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass
class BlockParams:
    ln1_w: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, mlp_ratio: int, trainable: bool,
             std: float = 0.02, dtype=None) -> BlockParams:
        hidden = dim * mlp_ratio

        def gauss(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=trainable, dtype=dtype)

        def const(value, n):
            return Tensor(np.full(n, value), requires_grad=trainable, dtype=dtype)

        return cls(
            ln1_w=const(1.0, dim), ln1_b=const(0.0, dim),
            wq=gauss(dim, dim), wk=gauss(dim, dim), wv=gauss(dim, dim),
            bq=const(0.0, dim), bk=const(0.0, dim), bv=const(0.0, dim),
            proj_w=gauss(dim, dim), proj_b=const(0.0, dim),
            ln2_w=const(1.0, dim), ln2_b=const(0.0, dim),
            fc1_w=gauss(dim, hidden), fc1_b=const(0.0, hidden),
            fc2_w=gauss(hidden, dim), fc2_b=const(0.0, dim),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_named(cls, table: dict[str, Tensor], prefix: str) -> BlockParams:
        return cls(**{f.name: table[f"{prefix}.{f.name}"] for f in fields(cls)})


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    if d % heads:
        raise ConfigError(f"dimension {d} not divisible by {heads} heads")
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(q.shape[-1]))
    return T.softmax(scores, axis=-1) @ v


def self_attention(x: Tensor, p: BlockParams, heads: int) -> Tensor:
    q = split_heads(x @ p.wq + p.bq, heads)
    k = split_heads(x @ p.wk + p.bk, heads)
    v = split_heads(x @ p.wv + p.bv, heads)
    ctx = merge_heads(scaled_dot_attention(q, k, v))
    return ctx @ p.proj_w + p.proj_b


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return T.gelu(x @ p.fc1_w + p.fc1_b) @ p.fc2_w + p.fc2_b


def block_forward(x: Tensor, p: BlockParams, heads: int) -> Tensor:
    x = x + self_attention(T.layer_norm(x, p.ln1_w, p.ln1_b, LN_EPS), p, heads)
    return x + mlp(T.layer_norm(x, p.ln2_w, p.ln2_b, LN_EPS), p)


def group_mean(outputs: list[Tensor], indices) -> Tensor:
    picked = [outputs[i] for i in indices]
    acc = picked[0]
    for t in picked[1:]:
        acc = acc + t
    return acc * (1.0 / len(picked)) if len(picked) > 1 else acc
