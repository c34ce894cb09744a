"""Anomaly maps and image scores from encoder/decoder feature discrepancy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cfl import cosine_distance_map
from .imageops import bilinear_upsample, gaussian_blur
from .tensor import Tensor


@dataclass
class AnomalyResult:
    map: np.ndarray
    score: float
    grid: tuple[int, int]


def image_score(amap: np.ndarray, reduction: str = "top1", top_fraction: float = 0.01) -> float:
    flat = np.asarray(amap, dtype=np.float64).reshape(-1)
    if reduction == "max":
        return float(flat.max())
    if reduction == "mean":
        return float(flat.mean())
    if reduction != "top1":
        raise ValueError(f"unknown score reduction {reduction!r}")
    k = max(1, math.ceil(top_fraction * flat.size - 1e-9))
    return float(np.sort(flat)[::-1][:k].mean())


def token_maps(fe1: Tensor, fe2: Tensor, f1: Tensor, f2: Tensor, cross: bool = True) -> np.ndarray:
    """Per-token discrepancy [B, N]: mean of the two pairwise cosine distances."""
    with T.no_grad():
        if cross:
            a, b = cosine_distance_map(fe1, f2), cosine_distance_map(fe2, f1)
        else:
            a, b = cosine_distance_map(fe1, f1), cosine_distance_map(fe2, f2)
    return 0.5 * (a.data.astype(np.float64) + b.data.astype(np.float64))


def anomaly_maps(fe1, fe2, f1, f2, grid, out_size, sigma: float, reduction: str = "top1",
                 top_fraction: float = 0.01, cross: bool = True) -> list[AnomalyResult]:
    tokens = token_maps(fe1, fe2, f1, f2, cross=cross)
    rows, cols = grid
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    if out_size[0] < rows or out_size[1] < cols:
        raise ValueError(f"output size {out_size} smaller than token grid {grid}")
    coarse = tokens.reshape(-1, rows, cols)
    smooth = gaussian_blur(bilinear_upsample(coarse, *out_size), sigma)
    return [AnomalyResult(map=m, score=image_score(m, reduction, top_fraction), grid=(rows, cols))
            for m in smooth]


def anomaly_map(fe1, fe2, f1, f2, grid, out_size, sigma: float, reduction: str = "top1",
                top_fraction: float = 0.01, cross: bool = True) -> AnomalyResult:
    """Single-image form; features carry a batch axis of one."""
    return anomaly_maps(fe1, fe2, f1, f2, grid, out_size, sigma, reduction, top_fraction, cross)[0]
