"""Map resampling used at inference: bilinear upsampling and Gaussian blur.

These run outside the gradient tape; they accept a ``Tensor`` or an ndarray and
return the same kind.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def _unwrap(x):
    return (x.data, True) if isinstance(x, Tensor) else (np.asarray(x), False)


def _axis_weights(n_in: int, n_out: int):
    # align_corners=False: source = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_upsample(x, out_h: int, out_w: int):
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    arr, wrapped = _unwrap(x)
    h, w = arr.shape[-2:]
    r0, r1, rf = _axis_weights(h, out_h)
    c0, c1, cf = _axis_weights(w, out_w)
    rf = rf[:, None]
    cf = cf[None, :]
    top = arr[..., r0, :][..., :, c0] * (1 - cf) + arr[..., r0, :][..., :, c1] * cf
    bot = arr[..., r1, :][..., :, c0] * (1 - cf) + arr[..., r1, :][..., :, c1] * cf
    out = (top * (1 - rf) + bot * rf).astype(arr.dtype, copy=False)
    return Tensor._wrap(out) if wrapped else out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    n = arr.shape[axis]
    out = np.zeros(arr.shape, dtype=np.float64)
    for k, weight in zip(range(-radius, radius + 1), kernel):
        idx = np.clip(np.arange(n) + k, 0, n - 1)
        out += weight * np.take(arr, idx, axis=axis)
    return out


def gaussian_blur(x, sigma: float):
    """Separable Gaussian, radius ceil(3*sigma), edges clamped. sigma=0 is identity."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    arr, wrapped = _unwrap(x)
    if sigma == 0:
        out = arr.copy()
    else:
        kernel = gaussian_kernel(sigma)
        out = _blur_axis(_blur_axis(arr, kernel, arr.ndim - 2), kernel, arr.ndim - 1)
        out = out.astype(arr.dtype, copy=False)
    return Tensor._wrap(out) if wrapped else out
