"""Cross-feature loss: cosine distance between shallow encoder / deep decoder
features and deep encoder / shallow decoder features, averaged over the
hardest fraction of tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

MINING_FRACTION = 0.1
COS_EPS = 1e-6


@dataclass
class LossReport:
    loss: float
    threshold_h: list[float] = field(default_factory=list)
    selected_fraction: list[float] = field(default_factory=list)
    per_pair: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "h": self.threshold_h,
                "selected_fraction": self.selected_fraction, "per_pair": self.per_pair}


def cosine_distance_map(za: Tensor, zb: Tensor) -> Tensor:
    """1 - cos(za_i, zb_i) per token over the feature axis.

    The norm product is floored at COS_EPS**2, so identical non-zero tokens
    score exactly 0 and opposite tokens exactly 2.
    """
    if za.shape != zb.shape:
        raise DimensionError(f"cosine distance: {za.shape} vs {zb.shape}")
    dot = T.reduce(za * zb, -1, "sum")
    na = T.reduce(T.square(za), -1, "sum")
    nb = T.reduce(T.square(zb), -1, "sum")
    denom = T.sqrt(T.clamp_min(na * nb, COS_EPS * COS_EPS))
    return 1.0 - dot / denom


def selection_size(n: int, fraction: float = MINING_FRACTION) -> int:
    return max(1, math.ceil(fraction * n - 1e-9))


def hard_mining_threshold(scores, fraction: float = MINING_FRACTION) -> tuple[float, np.ndarray]:
    """Return the k-th largest score (k = ceil(fraction * n)) and the flat
    indices of every score at or above it; ties at the threshold are kept."""
    flat = np.asarray(scores.data if isinstance(scores, Tensor) else scores).reshape(-1)
    if flat.size == 0:
        raise DimensionError("hard mining needs at least one score")
    k = selection_size(flat.size, fraction)
    h = np.sort(flat)[::-1][k - 1]
    return float(h), np.flatnonzero(flat >= h)


def _mined_mean(score: Tensor, fraction: float, invert: bool) -> tuple[Tensor, float, float]:
    h, idx = hard_mining_threshold(score, fraction)
    mask = np.zeros(score.size, dtype=bool)
    mask[idx] = True
    if invert:
        mask = ~mask if (~mask).any() else mask
    return T.masked_mean(score, mask.reshape(score.shape)), h, float(mask.mean())


def cross_feature_loss(fe1: Tensor, fe2: Tensor, f1: Tensor, f2: Tensor,
                       fraction: float = MINING_FRACTION,
                       invert_mining: bool = False) -> tuple[Tensor, LossReport]:
    for name, t in (("fe2", fe2), ("f1", f1), ("f2", f2)):
        if t.shape != fe1.shape:
            raise DimensionError(f"cross_feature_loss: {name} {t.shape} vs fe1 {fe1.shape}")
    shallow_deep, h1, frac1 = _mined_mean(cosine_distance_map(fe1, f2), fraction, invert_mining)
    deep_shallow, h2, frac2 = _mined_mean(cosine_distance_map(fe2, f1), fraction, invert_mining)
    loss = (shallow_deep + deep_shallow) * 0.5
    report = LossReport(loss=loss.item(), threshold_h=[h1, h2], selected_fraction=[frac1, frac2],
                        per_pair=[shallow_deep.item(), deep_shallow.item()])
    return loss, report


def plain_alignment_loss(fe1: Tensor, fe2: Tensor, f1: Tensor, f2: Tensor) -> tuple[Tensor, LossReport]:
    """Uncrossed, unmined variant: fe1 with f1 and fe2 with f2 over all tokens."""
    a = T.reduce(cosine_distance_map(fe1, f1), None, "mean")
    b = T.reduce(cosine_distance_map(fe2, f2), None, "mean")
    loss = (a + b) * 0.5
    return loss, LossReport(loss=loss.item(), threshold_h=[], selected_fraction=[1.0, 1.0],
                            per_pair=[a.item(), b.item()])
