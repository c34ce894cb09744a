"""Training, evaluation and single-image inference."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pnm
from . import tensor as T
from .backbone import content_hash
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import load_dataset, stack_views
from .errors import DatasetIntegrityError, NumericError, StorageError, ValidationError
from .metrics import MetricReport, image_metrics, pixel_metrics
from .model import Model
from .optim import StableAdamW
from .scoring import AnomalyResult, anomaly_maps
from .tensor import Tensor

log = logging.getLogger(__name__)

EVAL_BATCH = 40


def checkpoint_of(model: Model, optimizer: StableAdamW | None, iteration: int, rng_state: dict) -> Checkpoint:
    tensors = {name: t.data for name, t in model.named().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_table())
    return Checkpoint(config=json.loads(model.cfg.to_json()), tensors=tensors,
                      iteration=iteration, rng_state=rng_state)


def model_from_checkpoint(ck: Checkpoint, dtype=None) -> Model:
    cfg = RunConfig.from_dict(ck.config)
    return Model.from_table(cfg, ck.tensors, dtype=dtype)


class BatchSampler:
    """Epoch-wise shuffled batches of view indices.

    With joint views, whole samples are drawn so the views of one sample stay
    adjacent in the batch.
    """

    def __init__(self, n_views: int, batch_size: int, rng: np.random.Generator, group: int = 1):
        self.group = group
        self.units = n_views // group
        self.per_batch = max(1, batch_size // group)
        self.rng = rng
        self.queue: list[int] = []

    def next(self) -> np.ndarray:
        picked = []
        while len(picked) < self.per_batch:
            if not self.queue:
                self.queue = self.rng.permutation(self.units).tolist()
            picked.append(self.queue.pop())
        if self.group == 1:
            return np.array(picked)
        return np.concatenate([np.arange(u * self.group, (u + 1) * self.group) for u in picked])


@dataclass
class TrainResult:
    model: Model
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""


def _grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def train(cfg: RunConfig, images: np.ndarray, out_dir=None, dtype=None,
          backbone_table: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Train on normal views ``images`` [n, C, H, W] in [0, 1]."""
    m = cfg.model
    if images.ndim != 4 or images.shape[1:] != (m.channels, m.image_size, m.image_size):
        raise ValidationError(f"training images have shape {images.shape[1:]}, config expects "
                              f"({m.channels}, {m.image_size}, {m.image_size})")
    model = Model.init(cfg, dtype=dtype)
    if backbone_table:
        _substitute_backbone(model, backbone_table)
    dtype = model.decoder.blocks[0].wq.dtype
    params = model.trainable()
    opt = StableAdamW.from_config(params, cfg.optimizer)
    group = cfg.data.views if cfg.aam.joint_views else 1
    rng = np.random.default_rng([cfg.train.seed, 2])
    sampler = BatchSampler(len(images), cfg.train.batch_size, rng, group=group)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / "train_log.jsonl", "w")
        except OSError as exc:
            raise StorageError(f"cannot prepare output directory {out}: {exc}") from exc
    else:
        log_file = None
    frozen_before = content_hash(model.backbone.named())
    records = []
    try:
        for it in range(cfg.train.iterations):
            idx = sampler.next()
            batch = Tensor(images[idx], dtype=dtype)
            result = model.forward(batch)
            loss, report = model.loss(result)
            if not np.isfinite(report.loss):
                raise NumericError(f"non-finite loss at iteration {it}")
            opt.zero_grad()
            T.backward(loss)
            gnorm = _grad_norm(params)
            opt.step()
            record = {"iter": it, "loss": report.loss, "h": report.threshold_h,
                      "grad_norm": gnorm, "lr_eff": min(opt.last_lr_eff.values())}
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if it % 50 == 0:
                log.info("iter %d loss %.5f", it, report.loss)
            every = cfg.train.checkpoint_every
            if out is not None and every and (it + 1) % every == 0 and it + 1 < cfg.train.iterations:
                checkpoint_of(model, opt, it + 1, rng.bit_generator.state).save(
                    out / f"checkpoint_{it + 1:06d}.mvmc")
    except NumericError as exc:
        raise NumericError(f"{exc}; training aborted, last periodic checkpoint retained") from exc
    finally:
        if log_file is not None:
            log_file.close()
    ck = checkpoint_of(model, opt, cfg.train.iterations, rng.bit_generator.state)
    if out is not None:
        ck.save(out / "checkpoint.mvmc")
    return TrainResult(model=model, checkpoint=ck, log=records, backbone_hash_before=frozen_before,
                       backbone_hash_after=content_hash(model.backbone.named()))


def _substitute_backbone(model: Model, table: dict[str, np.ndarray]) -> None:
    current = model.backbone.named()
    for name, t in current.items():
        if name not in table:
            raise ValidationError(f"backbone weight {name} missing from substitute set")
        if table[name].shape != t.shape:
            raise ValidationError(f"backbone weight {name}: shape {table[name].shape}, expected {t.shape}")
        t.data = np.asarray(table[name], dtype=t.dtype).copy()


def predict(model: Model, images: np.ndarray, jobs: int = 1) -> list[AnomalyResult]:
    """Anomaly maps for images [n, C, H, W], merged in input order."""
    cfg = model.cfg
    dtype = model.decoder.blocks[0].wq.dtype
    group = cfg.data.views if cfg.toggles.aam_enabled and cfg.aam.joint_views else 1
    step = max(group, EVAL_BATCH - EVAL_BATCH % group)
    chunks = [images[i:i + step] for i in range(0, len(images), step)]

    def run(chunk):
        with T.no_grad():
            out = model.forward(Tensor(chunk, dtype=dtype))
        return anomaly_maps(out.fe1, out.fe2, out.f1, out.f2, out.grid, cfg.model.image_size,
                            cfg.sigma, cfg.scoring.reduction, cfg.scoring.top_fraction,
                            cross=cfg.toggles.cfl_enabled)

    if jobs <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    return [r for part in parts for r in part]


def evaluate_arrays(model: Model, images, masks, labels, sample_index, jobs: int = 1):
    results = predict(model, images, jobs=jobs)
    scores = np.array([r.score for r in results])
    maps = [r.map for r in results]
    report = MetricReport()
    report.image = image_metrics(scores, labels)
    report.pixel = pixel_metrics(maps, masks)
    n_samples = int(sample_index.max()) + 1
    sample_scores = np.full(n_samples, -np.inf)
    sample_labels = np.zeros(n_samples, dtype=int)
    np.maximum.at(sample_scores, sample_index, scores)
    np.maximum.at(sample_labels, sample_index, labels)
    if 0 < sample_labels.sum() < n_samples:
        report.sample = image_metrics(sample_scores, sample_labels)
    report.counts = {
        "image": {"positives": int(np.sum(labels)), "negatives": int(len(labels) - np.sum(labels))},
        "pixel": {"positives": int(np.sum(masks)), "negatives": int(np.size(masks) - np.sum(masks))},
        "sample": {"positives": int(sample_labels.sum()), "negatives": int(n_samples - sample_labels.sum())},
    }
    return report, results


def evaluate(ck: Checkpoint, data_root, out_dir=None, jobs: int = 1, dtype=None,
             heatmaps: bool = False) -> MetricReport:
    model = model_from_checkpoint(ck, dtype=dtype)
    cfg = model.cfg
    samples = list(load_dataset(data_root, "test", image_size=cfg.model.image_size,
                                ))
    if not samples:
        raise DatasetIntegrityError(f"no test samples under {data_root}")
    arrays = stack_views(samples)
    if arrays["images"].shape[1] != cfg.model.channels:
        raise ValidationError(f"test images have {arrays['images'].shape[1]} channels, "
                              f"checkpoint expects {cfg.model.channels}")
    report, results = evaluate_arrays(model, arrays["images"], arrays["masks"], arrays["labels"],
                                      arrays["sample"], jobs=jobs)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "metrics.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write metrics to {out}: {exc}") from exc
        if heatmaps:
            hdir = out / "heatmaps"
            hdir.mkdir(exist_ok=True)
            k = 0
            for s in samples:
                for v in range(len(s.views)):
                    pnm.write_heatmap(hdir / f"{s.category}_{s.sample_id}_{v}.pgm", results[k].map)
                    k += 1
    return report


def load_image(path, cfg: RunConfig) -> np.ndarray:
    arr = pnm.read(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    size = cfg.model.image_size
    if arr.shape[:2] != (size, size):
        raise ValidationError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, model expects {size}x{size}")
    if arr.dtype != np.uint8:
        raise ValidationError(f"{path}: expected an 8-bit image")
    return np.transpose(pnm.from_uint8(arr), (2, 0, 1))[None]


def infer(ck: Checkpoint, image_path, out_dir, dtype=None) -> AnomalyResult:
    model = model_from_checkpoint(ck, dtype=dtype)
    cfg = model.cfg
    if cfg.toggles.aam_enabled and cfg.aam.joint_views and cfg.data.views > 1:
        raise ValidationError("single-image inference is unavailable with aam.joint_views")
    image = load_image(image_path, cfg)
    result = predict(model, image)[0]
    out = Path(out_dir)
    stem = Path(image_path).stem
    try:
        out.mkdir(parents=True, exist_ok=True)
        pnm.write_heatmap(out / f"{stem}_heatmap.pgm", result.map)
        payload = {"score": result.score, "config_hash": cfg.digest(), "image": str(image_path)}
        (out / f"{stem}_result.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write inference output to {out}: {exc}") from exc
    return result
