"""Trainable pre-encoder gate: per-image weighted normalization, channel gating
and spatial gating applied to the raw image before patching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .tensor import Tensor

SIGMA_EPS = 1e-5


@dataclass
class PriorGateParams:
    gamma: Tensor
    eps: float = SIGMA_EPS

    @classmethod
    def init(cls, channels: int, dtype=None) -> PriorGateParams:
        return cls(gamma=Tensor(np.ones(channels), requires_grad=True, dtype=dtype))

    def named(self) -> dict[str, Tensor]:
        return {"prior_gate.gamma": self.gamma}


@dataclass
class GateTrace:
    alpha: Tensor
    beta: Tensor
    x_ch: Tensor
    x_prior: Tensor


def _check_channels(x: Tensor, params: PriorGateParams) -> None:
    if x.ndim != 4 or x.shape[1] != params.gamma.shape[0]:
        raise DimensionError(
            f"prior gate expects [B, {params.gamma.shape[0]}, H, W], got {x.shape}")


def weighted_norm(x: Tensor, params: PriorGateParams) -> Tensor:
    _check_channels(x, params)
    mu = T.reduce(x, (2, 3), "mean", keepdims=True)
    sigma = T.std(x, (2, 3), eps=params.eps)
    gamma = params.gamma.reshape(1, -1, 1, 1)
    return gamma * ((x - mu) / sigma)


def channel_weights(params: PriorGateParams) -> Tensor:
    mags = T.abs_(params.gamma)
    total = mags.sum()
    if abs(total.item()) < T.DENOM_FLOOR:
        raise NumericError("channel weights undefined: all gamma entries are zero")
    return mags / total


def channel_gate(x: Tensor, x_norm: Tensor, alpha: Tensor) -> Tensor:
    if x.shape != x_norm.shape:
        raise DimensionError(f"channel_gate: {x.shape} vs {x_norm.shape}")
    gate = T.sigmoid(alpha.reshape(1, -1, 1, 1) * x_norm)
    return gate * x


def spatial_weights(x_ch: Tensor, allow_zero: bool = False) -> Tensor:
    """Channel-mean map normalized to sum to one per image.

    With ``allow_zero`` an image whose gated input is identically zero gets
    uniform weights (the spatial gate is then 0 * anything = 0 for it);
    otherwise a vanishing total raises.
    """
    m = T.reduce(x_ch, 1, "mean")
    total = T.reduce(m, (1, 2), "sum", keepdims=True)
    small = np.abs(total.data) < T.DENOM_FLOOR
    if small.any():
        dead = np.all(x_ch.data == 0, axis=(1, 2, 3)).reshape(small.shape)
        if not allow_zero or not np.all(dead[small]):
            raise NumericError("spatial weights undefined: channel-mean map sums to ~0")
        hw = m.shape[1] * m.shape[2]
        fill = Tensor._wrap(np.where(small, 1.0 / hw, 0.0).astype(m.dtype))
        total = total + Tensor._wrap(small.astype(m.dtype))
        return m / total + fill
    return m / total


def spatial_gate(x_ch: Tensor, beta: Tensor) -> Tensor:
    b, _, h, w = x_ch.shape
    if beta.shape != (b, h, w):
        raise DimensionError(f"spatial_gate: beta {beta.shape} vs input {x_ch.shape}")
    return T.sigmoid(beta.reshape(b, 1, h, w) * x_ch) * x_ch


def prior_forward(x: Tensor, params: PriorGateParams) -> tuple[Tensor, GateTrace]:
    x_norm = weighted_norm(x, params)
    alpha = channel_weights(params)
    x_ch = channel_gate(x, x_norm, alpha)
    beta = spatial_weights(x_ch, allow_zero=True)
    x_prior = spatial_gate(x_ch, beta)
    return x_prior, GateTrace(alpha=alpha, beta=beta, x_ch=x_ch, x_prior=x_prior)
