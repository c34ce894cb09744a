"""Finite-difference verification of the analytic gradients of every trainable
module, run in float64 on small random batches built from the model config."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .aam import aam_forward
from .cfl import cross_feature_loss, plain_alignment_loss
from .config import RunConfig
from .decoder import decode
from .model import Model
from .prior_gate import prior_forward
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
# gradients smaller than this are compared in absolute terms
ABS_FLOOR = 1e-6

GradHook = Callable[[str, str, np.ndarray], np.ndarray]


@dataclass
class GradcheckRow:
    module: str
    status: str  # "pass", "fail" or "skipped"
    max_rel_error: float = 0.0
    coords: int = 0
    worst: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def _probe(rng: np.random.Generator, grad: np.ndarray, per_tensor: int) -> list[int]:
    flat = np.abs(grad.reshape(-1))
    picks = {int(np.argmax(flat))}
    picks.update(rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False).tolist())
    return sorted(picks)


def check_closure(module: str, loss_fn: Callable[[], Tensor], leaves: dict[str, Tensor],
                  rng: np.random.Generator, per_tensor: int = 4,
                  hook: GradHook | None = None) -> GradcheckRow:
    """Compare backprop against central differences of ``loss_fn`` for sampled
    coordinates of each leaf tensor."""
    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    T.backward(loss_fn())
    worst, where, count = 0.0, "", 0
    for name, leaf in leaves.items():
        grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        if hook is not None:
            grad = hook(module, name, grad.copy())
        flat = leaf.data.reshape(-1)
        for i in _probe(rng, grad, per_tensor):
            orig = flat[i]
            with T.no_grad():
                flat[i] = orig + STEP
                hi = loss_fn().item()
                flat[i] = orig - STEP
                lo = loss_fn().item()
            flat[i] = orig
            err = relative_error(float(grad.reshape(-1)[i]), (hi - lo) / (2 * STEP))
            count += 1
            if err > worst:
                worst, where = err, f"{name}[{i}]"
    status = "pass" if worst <= TOLERANCE else "fail"
    return GradcheckRow(module, status, worst, count, where)


def _projection(rng: np.random.Generator, shape) -> Tensor:
    # scaled so the probe loss stays O(1) and round-off in the differences stays small
    r = rng.standard_normal(shape)
    return Tensor(r / np.sqrt(r.size), dtype=np.float64)


def _dot(a: Tensor, r: Tensor) -> Tensor:
    return T.reduce(a * r, None, "sum")


def gradcheck(cfg: RunConfig, seed: int = 0, batch: int = 2, per_tensor: int = 4,
              hook: GradHook | None = None) -> list[GradcheckRow]:
    """Run the checks for prior gate, AAM, decoder and loss; toggled-off
    modules are reported as skipped."""
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        model = Model.init(cfg, dtype=np.float64)
        m = cfg.model
        images = Tensor(rng.uniform(0.0, 1.0, size=(batch, m.channels, m.image_size, m.image_size)))
        with T.no_grad():
            out = model.forward(images)
        rows = []

        if cfg.toggles.sfe_enabled:
            x = Tensor(images.data.copy())
            r = _projection(rng, x.shape)
            rows.append(check_closure(
                "prior-gate", lambda: _dot(prior_forward(x, model.prior)[0], r),
                {"input": x, **model.prior.named()}, rng, per_tensor, hook))
        else:
            rows.append(GradcheckRow("prior-gate", "skipped"))

        if cfg.toggles.aam_enabled:
            f_i = Tensor(out.f_i.data.copy())
            r = _projection(rng, f_i.shape)
            rows.append(check_closure(
                "aam", lambda: _dot(aam_forward(f_i, model.aam, residual=cfg.aam.residual)[0], r),
                {"input": f_i, **model.aam.named()}, rng, per_tensor, hook))
        else:
            rows.append(GradcheckRow("aam", "skipped"))

        f_m = Tensor(out.f_m.data.copy())
        r1, r2 = _projection(rng, out.f1.shape), _projection(rng, out.f2.shape)

        def decoder_loss():
            f1, f2 = decode(f_m, model.decoder)
            return _dot(f1, r1) + _dot(f2, r2)

        rows.append(check_closure("decoder", decoder_loss, {"input": f_m, **model.decoder.named()},
                                  rng, per_tensor, hook))

        feats = {k: Tensor(getattr(out, k).data.copy()) for k in ("fe1", "fe2", "f1", "f2")}
        if cfg.toggles.cfl_enabled:
            def loss_fn():
                return cross_feature_loss(feats["fe1"], feats["fe2"], feats["f1"], feats["f2"],
                                          fraction=cfg.cfl.mining_fraction,
                                          invert_mining=cfg.cfl.invert_mining)[0]
        else:
            def loss_fn():
                return plain_alignment_loss(feats["fe1"], feats["fe2"], feats["f1"], feats["f2"])[0]
        rows.append(check_closure("cfl", loss_fn, feats, rng, per_tensor, hook))
    return rows


def format_table(rows: list[GradcheckRow]) -> str:
    lines = [f"{'module':<12}{'status':<9}{'max_rel_err':>13}{'coords':>8}  worst"]
    for row in rows:
        err = "-" if row.status == "skipped" else f"{row.max_rel_error:.3e}"
        lines.append(f"{row.module:<12}{row.status:<9}{err:>13}{row.coords:>8}  {row.worst}")
    return "\n".join(lines)
