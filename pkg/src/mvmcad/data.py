"""Synthetic multi-view dataset generation and on-disk dataset loading.

Layout::

    <root>/<category>/train/ok/<sample>_<view>.ppm
    <root>/<category>/test/ok/<sample>_<view>.ppm
    <root>/<category>/test/ng/<sample>_<view>.ppm
    <root>/<category>/ground_truth/<sample>_<view>_mask.pgm

Every view of an ``ng`` sample has a mask; an all-zero mask marks a view in
which the defect is not visible (label 0).
"""
from __future__ import annotations

import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from .errors import DatasetIntegrityError, StorageError

IMAGE_SUFFIXES = (".ppm", ".pgm")
BACKGROUND = np.array([0.12, 0.12, 0.14])
DEFECT_KINDS = ("scratch", "blob", "chip")


@dataclass
class MultiViewSample:
    sample_id: str
    category: str
    split: str
    views: list[np.ndarray]
    masks: list[np.ndarray]
    labels: list[int]
    paths: list[str] = field(default_factory=list)

    @property
    def label(self) -> int:
        return int(any(self.labels))


@dataclass
class Defect:
    kind: str
    params: dict
    mask: np.ndarray


# -- procedural objects --------------------------------------------------------

def _disc(q, lat):
    r = np.hypot(q[..., 0], q[..., 1])
    inside = r <= lat["size"]
    tex = 0.82 + 0.18 * np.cos(2 * np.pi * 3.0 * r / lat["size"] + lat["phase"])
    return inside, tex


def _plate(q, lat):
    s = lat["size"] * 0.85
    inside = (np.abs(q[..., 0]) <= s) & (np.abs(q[..., 1]) <= s)
    tex = 0.85 + 0.15 * np.sign(np.sin(np.pi * 2.5 * q[..., 0] / s + lat["phase"])
                                * np.sin(np.pi * 2.5 * q[..., 1] / s))
    return inside, tex


def _ring(q, lat):
    r = np.hypot(q[..., 0], q[..., 1])
    inside = (r <= lat["size"]) & (r >= 0.45 * lat["size"])
    ang = np.arctan2(q[..., 1], q[..., 0])
    tex = 0.85 + 0.15 * np.cos(6 * ang + lat["phase"])
    return inside, tex


def _tile(q, lat):
    inside = np.abs(q[..., 0]) + np.abs(q[..., 1]) <= lat["size"] * 1.15
    tex = 0.8 + 0.2 * (0.5 + 0.5 * np.sin(2 * np.pi * (q[..., 0] - q[..., 1]) * 1.5 + lat["phase"]))
    return inside, tex


CATEGORIES = {
    "disc": (_disc, (0.25, 0.45, 0.80)),
    "plate": (_plate, (0.35, 0.68, 0.38)),
    "ring": (_ring, (0.75, 0.62, 0.30)),
    "tile": (_tile, (0.62, 0.40, 0.66)),
}


def _category_code(name: str) -> int:
    return zlib.crc32(name.encode())


def _rng(seed: int, category: str, split: str, sample: int, view: int | None = None):
    key = [seed, _category_code(category), {"train": 0, "test": 1}[split], sample]
    if view is not None:
        key.append(view + 1)
    return np.random.default_rng(key)


def sample_latent(rng: np.random.Generator, category: str) -> dict:
    _, base = CATEGORIES[category]
    return {
        "size": 0.62 + rng.uniform(-0.05, 0.05),
        "phase": rng.uniform(0, 2 * np.pi),
        "angle": rng.uniform(0, 2 * np.pi),
        "color": np.clip(np.array(base) + rng.uniform(-0.04, 0.04, size=3), 0, 1),
    }


def view_transform(view: int, rng: np.random.Generator) -> np.ndarray:
    """2x3 affine (object frame -> normalized image frame) for one camera view.

    View 0 looks straight down; views 1..4 are foreshortened along four
    symmetric directions.
    """
    if view == 0:
        squash, direction = 1.0, 0.0
    else:
        squash, direction = 0.78, (view - 1) * np.pi / 2
    c, s = np.cos(direction), np.sin(direction)
    rot = np.array([[c, -s], [s, c]])
    lin = rot @ np.diag([1.0, squash]) @ rot.T
    shift = rng.uniform(-0.06, 0.06, size=2)
    return np.hstack([lin, shift[:, None]])


def render_view(category: str, latent: dict, view: int, size: int, rng: np.random.Generator):
    shape_fn, _ = CATEGORIES[category]
    affine = view_transform(view, rng)
    coords = (np.arange(size) + 0.5) / (size / 2.0) - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    p = np.stack([xx, yy], axis=-1) - affine[:, 2]
    inv = np.linalg.inv(affine[:, :2])
    c, s = np.cos(latent["angle"]), np.sin(latent["angle"])
    spin = np.array([[c, s], [-s, c]])
    q = p @ inv.T @ spin.T
    inside, tex = shape_fn(q, latent)
    light = rng.uniform(0.93, 1.07)
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND
    obj = latent["color"][None, None, :] * (tex * light)[..., None]
    img = np.where(inside[..., None], obj, img)
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0), inside


# -- defects -------------------------------------------------------------------

def rasterize_ellipse(cx: float, cy: float, a: float, b: float, theta: float, h: int, w: int) -> np.ndarray:
    """Pixels whose centre (x + 0.5, y + 0.5) falls inside the rotated ellipse."""
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def rasterize_polyline(points: np.ndarray, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for p0, p1 in zip(points[:-1], points[1:]):
        steps = max(2, int(np.ceil(np.hypot(*(p1 - p0)) * 4)) + 1)
        t = np.linspace(0.0, 1.0, steps)[:, None]
        pts = np.floor(p0 + t * (p1 - p0)).astype(int)
        ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        mask[pts[ok, 1], pts[ok, 0]] = True
    return mask


def _object_point(inside: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    ys, xs = np.nonzero(inside)
    i = rng.integers(len(xs))
    return xs[i] + 0.5, ys[i] + 0.5


def make_defect(kind: str, inside: np.ndarray, rng: np.random.Generator) -> Defect:
    h, w = inside.shape
    scale = h / 32.0
    if kind == "blob":
        cx, cy = _object_point(inside, rng)
        params = {"cx": cx, "cy": cy, "a": float(rng.uniform(1.6, 3.2) * scale),
                  "b": float(rng.uniform(1.6, 3.2) * scale), "theta": float(rng.uniform(0, np.pi))}
        mask = rasterize_ellipse(params["cx"], params["cy"], params["a"], params["b"], params["theta"], h, w)
    elif kind == "scratch":
        start = np.array(_object_point(inside, rng))
        pts = [start]
        heading = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(2, 4))):
            heading += rng.uniform(-0.7, 0.7)
            length = rng.uniform(3.0, 6.0) * scale
            pts.append(pts[-1] + length * np.array([np.cos(heading), np.sin(heading)]))
        points = np.array(pts)
        params = {"points": points.tolist()}
        mask = rasterize_polyline(points, h, w)
    elif kind == "chip":
        edge = inside & ~(np.roll(inside, 1, 0) & np.roll(inside, -1, 0)
                          & np.roll(inside, 1, 1) & np.roll(inside, -1, 1))
        cx, cy = _object_point(edge, rng)
        r = float(rng.uniform(2.2, 3.4) * scale)
        ys, xs = np.mgrid[0:h, 0:w]
        disk = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
        params = {"cx": cx, "cy": cy, "r": r}
        mask = disk & inside
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    return Defect(kind=kind, params=params, mask=mask)


def apply_defect(img: np.ndarray, defect: Defect, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    if defect.kind == "chip":
        color = BACKGROUND
    elif defect.kind == "scratch":
        color = np.array([0.95, 0.93, 0.85]) if rng.random() < 0.5 else np.array([0.03, 0.03, 0.03])
    else:
        color = np.array([0.88, 0.32, 0.12]) if rng.random() < 0.5 else np.array([0.30, 0.18, 0.06])
    noise = rng.normal(0.0, 0.01, size=img.shape)
    out[defect.mask] = np.clip(color + noise[defect.mask], 0.0, 1.0)
    return out


def render_sample(category: str, split: str, sample: int, views: int, size: int, seed: int,
                  defective: bool = False):
    """Render every view of one sample: returns images, masks and defect records."""
    base = _rng(seed, category, split, sample)
    latent = sample_latent(base, category)
    bad_views: set[int] = set()
    if defective:
        count = int(base.integers(1, min(3, views) + 1))
        bad_views = set(base.choice(views, size=count, replace=False).tolist())
    images, masks, defects = [], [], []
    for v in range(views):
        rng = _rng(seed, category, split, sample, v)
        img, inside = render_view(category, latent, v, size, rng)
        mask = np.zeros((size, size), dtype=bool)
        defect = None
        if v in bad_views:
            kind = DEFECT_KINDS[int(rng.integers(len(DEFECT_KINDS)))]
            defect = make_defect(kind, inside, rng)
            img = apply_defect(img, defect, rng)
            mask = defect.mask
        images.append(pnm.to_uint8(img))
        masks.append(mask)
        defects.append(defect)
    return images, masks, defects


@dataclass
class SynthPlan:
    categories: list[str]
    train_samples: int = 50
    test_normal: int = 20
    test_defective: int = 20
    views: int = 5
    image_size: int = 32
    seed: int = 0

    @classmethod
    def from_config(cls, cfg) -> SynthPlan:
        d = cfg.data
        return cls(categories=list(d.categories), train_samples=d.train_samples,
                   test_normal=d.test_normal, test_defective=d.test_defective,
                   views=d.views, image_size=cfg.model.image_size, seed=d.seed)


def _write_sample(root: Path, plan: SynthPlan, category: str, split: str, index: int, defective: bool):
    images, masks, _ = render_sample(category, split, index, plan.views, plan.image_size, plan.seed,
                                     defective=defective)
    sid = f"{index:04d}"
    folder = root / category / split / ("ng" if defective else "ok")
    for v, (img, mask) in enumerate(zip(images, masks)):
        pnm.write(folder / f"{sid}_{v}.ppm", img)
        if defective:
            pnm.write(root / category / "ground_truth" / f"{sid}_{v}_mask.pgm",
                      mask.astype(np.uint8) * 255)


def synth_dataset(out, plan: SynthPlan, jobs: int = 1) -> Path:
    root = Path(out)
    jobs_list = []
    for category in plan.categories:
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}; known: {sorted(CATEGORIES)}")
        for sub in ("train/ok", "test/ok", "test/ng", "ground_truth"):
            try:
                (root / category / sub).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageError(f"cannot create {root / category / sub}: {exc}") from exc
        jobs_list += [(category, "train", i, False) for i in range(plan.train_samples)]
        jobs_list += [(category, "test", i, False) for i in range(plan.test_normal)]
        jobs_list += [(category, "test", plan.test_normal + i, True) for i in range(plan.test_defective)]
    if jobs <= 1:
        for job in jobs_list:
            _write_sample(root, plan, *job)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda job: _write_sample(root, plan, *job), jobs_list))
    manifest = {"categories": plan.categories, "train_samples": plan.train_samples,
                "test_normal": plan.test_normal, "test_defective": plan.test_defective,
                "views": plan.views, "image_size": plan.image_size, "seed": plan.seed}
    try:
        (root / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {root / 'dataset.json'}: {exc}") from exc
    return root


# -- loading -------------------------------------------------------------------

def _parse_name(path: Path) -> tuple[str, int]:
    stem = path.stem
    sid, _, view = stem.rpartition("_")
    if not sid or not view.isdigit():
        raise DatasetIntegrityError(f"unexpected image name {path}")
    return sid, int(view)


def _read_image(path: Path) -> np.ndarray:
    arr = pnm.read(path)
    if arr.dtype != np.uint8:
        raise DatasetIntegrityError(f"{path}: expected 8-bit image")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return pnm.from_uint8(arr)


def _collect(folder: Path) -> dict[str, dict[int, Path]]:
    groups: dict[str, dict[int, Path]] = {}
    if not folder.is_dir():
        return groups
    for path in sorted(folder.iterdir()):
        if path.suffix not in IMAGE_SUFFIXES:
            continue
        sid, view = _parse_name(path)
        groups.setdefault(sid, {})[view] = path
    return groups


def load_dataset(root, split: str = "train", image_size: int | None = None,
                 categories: list[str] | None = None):
    """Yield samples in (category, sample_id) lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise StorageError(f"dataset root {root} is not a directory")
    cats = sorted(p.name for p in root.iterdir() if p.is_dir())
    if categories:
        missing = [c for c in categories if c not in cats]
        if missing:
            raise DatasetIntegrityError(f"categories {missing} not found under {root}")
        cats = sorted(categories)
    for category in cats:
        base = root / category / split
        if split == "train" and _collect(base / "ng"):
            raise DatasetIntegrityError(f"{base / 'ng'}: training split must contain only normal samples")
        entries = [(sid, views, "ok") for sid, views in _collect(base / "ok").items()]
        entries += [(sid, views, "ng") for sid, views in _collect(base / "ng").items()]
        for sid, views, kind in sorted(entries, key=lambda e: e[0]):
            imgs, masks, labels, paths = [], [], [], []
            for v in sorted(views):
                path = views[v]
                img = _read_image(path)
                if image_size is not None and img.shape[:2] != (image_size, image_size):
                    raise DatasetIntegrityError(
                        f"{path}: image is {img.shape[1]}x{img.shape[0]}, expected {image_size}x{image_size}")
                if kind == "ng":
                    mpath = root / category / "ground_truth" / f"{sid}_{v}_mask.pgm"
                    if not mpath.exists():
                        raise DatasetIntegrityError(f"missing mask {mpath} for anomalous view {path}")
                    raw = pnm.read(mpath)
                    if raw.shape != img.shape[:2]:
                        raise DatasetIntegrityError(
                            f"{mpath}: mask shape {raw.shape} does not match image {img.shape[:2]}")
                    mask = raw > 0
                else:
                    mask = np.zeros(img.shape[:2], dtype=bool)
                imgs.append(img)
                masks.append(mask)
                labels.append(int(mask.any()))
                paths.append(str(path))
            yield MultiViewSample(sample_id=sid, category=category, split=split, views=imgs,
                                  masks=masks, labels=labels, paths=paths)


def stack_views(samples) -> dict[str, np.ndarray]:
    """Flatten samples into per-view arrays: images [n, C, H, W] and friends."""
    images, masks, labels, owner = [], [], [], []
    for i, s in enumerate(samples):
        for img, mask, label in zip(s.views, s.masks, s.labels):
            images.append(np.transpose(img, (2, 0, 1)))
            masks.append(mask)
            labels.append(label)
            owner.append(i)
    if not images:
        raise DatasetIntegrityError("dataset split is empty")
    return {"images": np.stack(images).astype(np.float32), "masks": np.stack(masks),
            "labels": np.array(labels, dtype=np.int64), "sample": np.array(owner, dtype=np.int64)}
