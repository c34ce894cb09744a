"""Anomaly amplification: global token attention followed by norm-based
suppression of dominant token patterns.

Reading of the tensor contractions used here:

* context ``F`` is normalized per (head, coordinate) across the token axis;
* a token's similarity is its squared normalized norm times the head
  temperature, and ``Pi`` is the softmax of that over tokens;
* the suppression factor is ``1 / (1 + sum_j Pi_j * F_j**2)`` per
  (head, coordinate), shared by all tokens;
* the output is ``W_out(-(F * Pi) * Att)`` with heads merged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import merge_heads, scaled_dot_attention, split_heads
from .errors import ConfigError, DimensionError
from .tensor import Tensor

_PROJECTIONS = ("wq", "wk", "wv", "wf", "wout")


@dataclass
class AamParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wf: Tensor
    wout: Tensor
    temp: Tensor
    biases: dict[str, Tensor] | None = None

    @property
    def heads(self) -> int:
        return self.temp.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int, std: float,
             temp_init: float = 1.0, bias: bool = False, dtype=None) -> AamParams:
        if dim % heads:
            raise ConfigError(f"embed_dim {dim} not divisible by {heads} heads")
        if temp_init <= 0:
            raise ConfigError("temperature must start strictly positive")
        mats = {k: Tensor(rng.normal(0.0, std, size=(dim, dim)), requires_grad=True, dtype=dtype)
                for k in _PROJECTIONS}
        biases = None
        if bias:
            biases = {k: Tensor(np.zeros(dim), requires_grad=True, dtype=dtype) for k in _PROJECTIONS}
        temp = Tensor(np.full(heads, temp_init), requires_grad=True, dtype=dtype)
        return cls(**mats, temp=temp, biases=biases)

    def named(self) -> dict[str, Tensor]:
        table = {f"aam.{k}": getattr(self, k) for k in _PROJECTIONS}
        table["aam.temp"] = self.temp
        if self.biases:
            table.update({f"aam.b{k[1:]}": v for k, v in self.biases.items()})
        return table

    @classmethod
    def from_named(cls, table: dict[str, Tensor]) -> AamParams:
        biases = None
        if "aam.bq" in table:
            biases = {k: table[f"aam.b{k[1:]}"] for k in _PROJECTIONS}
        return cls(**{k: table[f"aam.{k}"] for k in _PROJECTIONS}, temp=table["aam.temp"], biases=biases)

    def linear(self, x: Tensor, key: str) -> Tensor:
        y = x @ getattr(self, key)
        if self.biases:
            y = y + self.biases[key]
        return y


@dataclass
class AamTrace:
    f_ctx: Tensor
    f_hat: Tensor
    sim: Tensor
    pi: Tensor
    att: Tensor
    out: Tensor

    def named(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("f_ctx", "f_hat", "sim", "pi", "att", "out")}


def qkv_project(f_i: Tensor, params: AamParams) -> tuple[Tensor, Tensor, Tensor]:
    if f_i.ndim != 3 or f_i.shape[-1] != params.wq.shape[0]:
        raise DimensionError(f"AAM expects [B, N, {params.wq.shape[0]}], got {f_i.shape}")
    h = params.heads
    return (split_heads(params.linear(f_i, "wq"), h),
            split_heads(params.linear(f_i, "wk"), h),
            split_heads(params.linear(f_i, "wv"), h))


def attention_context(q: Tensor, k: Tensor, v: Tensor, params: AamParams) -> Tensor:
    ctx = merge_heads(scaled_dot_attention(q, k, v))
    return split_heads(params.linear(ctx, "wf"), params.heads)


def token_normalize(f_ctx: Tensor) -> Tensor:
    return T.normalize_l2(f_ctx, axis=2, eps=T.NORM_EPS)


def similarity_scores(f_hat: Tensor, params: AamParams) -> Tensor:
    energy = T.reduce(T.square(f_hat), -1, "sum")
    return energy * params.temp.reshape(1, -1, 1)


def soft_distribution(sim: Tensor) -> Tensor:
    return T.softmax(sim, axis=-1)


def suppression_factor(pi: Tensor, f_ctx: Tensor) -> Tensor:
    b, h, n = pi.shape
    weighted_energy = pi.reshape(b, h, 1, n) @ T.square(f_ctx)
    return T.reciprocal(1.0 + weighted_energy)


def amplify(f_ctx: Tensor, pi: Tensor, att: Tensor, params: AamParams) -> Tensor:
    b, h, n, _ = f_ctx.shape
    suppressed = -((f_ctx * pi.reshape(b, h, n, 1)) * att)
    return params.linear(merge_heads(suppressed), "wout")


def aam_forward(f_i: Tensor, params: AamParams, residual: bool = False) -> tuple[Tensor, AamTrace]:
    q, k, v = qkv_project(f_i, params)
    f_ctx = attention_context(q, k, v, params)
    f_hat = token_normalize(f_ctx)
    sim = similarity_scores(f_hat, params)
    pi = soft_distribution(sim)
    att = suppression_factor(pi, f_ctx)
    out = amplify(f_ctx, pi, att, params)
    if residual:
        out = out + f_i
    return out, AamTrace(f_ctx=f_ctx, f_hat=f_hat, sim=sim, pi=pi, att=att, out=out)
