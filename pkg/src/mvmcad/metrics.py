"""Detection and localization metrics: AUROC, AP, F1-max, AUPRO."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import MetricDomainError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise MetricDomainError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(pos > neg) + 0.5 * P(pos == neg)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricDomainError("AUROC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-interpolated PR area; ties ordered by a stable descending sort."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricDomainError("AP needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp[hits] / (np.flatnonzero(hits) + 1.0)
    return float(precision.sum() / n_pos)


def f1_max(scores, labels) -> float:
    """Best F1 over thresholds at every distinct score (predict score >= t)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricDomainError("F1-max needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    predicted = ends + 1.0
    f1 = 2.0 * tp[ends] / (predicted + n_pos)
    return float(f1.max())


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, int(count)


def _integrate_to_limit(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    inside = np.flatnonzero(fpr <= limit)
    last = inside[-1]
    x = fpr[: last + 1]
    yv = pro[: last + 1]
    area = float(np.sum((x[1:] - x[:-1]) * (yv[1:] + yv[:-1]) / 2.0))
    if x[-1] < limit and last + 1 < fpr.size:
        x0, x1 = fpr[last], fpr[last + 1]
        y0, y1 = pro[last], pro[last + 1]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        area += (limit - x0) * (y0 + y_lim) / 2.0
    return area / limit


def pro_curve(maps, masks) -> tuple[np.ndarray, np.ndarray]:
    """Exact (FPR, mean per-region overlap) at every distinct map value,
    descending, starting from (0, 0)."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(maps) != len(masks) or any(a.shape != b.shape for a, b in zip(maps, masks)):
        raise MetricDomainError("maps and masks must align one to one with equal shapes")
    region_w = []
    total_regions = 0
    for mask in masks:
        labels, count = label_regions(mask)
        sizes = np.bincount(labels.reshape(-1), minlength=count + 1).astype(np.float64)
        per_pixel = np.where(labels > 0, 1.0 / sizes[labels], 0.0)
        region_w.append(per_pixel.reshape(-1))
        total_regions += count
    if total_regions == 0:
        raise MetricDomainError("AUPRO needs at least one anomalous region")
    neg = ~np.concatenate([m.reshape(-1) for m in masks])
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise MetricDomainError("AUPRO needs at least one normal pixel")
    scores = np.concatenate([m.reshape(-1) for m in maps])
    w_pro = np.concatenate(region_w) / total_regions
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    fp = np.cumsum(neg[order])[ends]
    # summed 1/size weights can overshoot 1 by rounding
    pro = np.minimum(np.cumsum(w_pro[order])[ends], 1.0)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, pro]


def aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    if not 0 < fpr_limit <= 1:
        raise MetricDomainError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks)
    return _integrate_to_limit(fpr, pro, fpr_limit)


@dataclass
class MetricReport:
    image: dict = field(default_factory=dict)
    pixel: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    sample: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def image_metrics(scores, labels) -> dict:
    return {"auroc": auroc(scores, labels), "ap": average_precision(scores, labels),
            "f1_max": f1_max(scores, labels)}


def pixel_metrics(maps, masks, fpr_limit: float = 0.3) -> dict:
    flat_scores = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps])
    flat_labels = np.concatenate([np.asarray(m, dtype=bool).reshape(-1) for m in masks])
    out = image_metrics(flat_scores, flat_labels)
    out["aupro"] = aupro(maps, masks, fpr_limit)
    return out
