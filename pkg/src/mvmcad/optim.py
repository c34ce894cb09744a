"""StableAdamW with AMSGrad.

Adam moments with bias correction, a running maximum of the corrected second
moment, and a per-tensor learning-rate cut when the RMS of the raw update
exceeds ``clip_rms``. Weight decay is decoupled and applied with the
effective learning rate before the update.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tensor


class StableAdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 2e-3, betas=(0.9, 0.999),
                 weight_decay: float = 1e-4, clip_rms: float = 1.0, eps: float = 1e-8):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.clip_rms = clip_rms
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.vmax = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.last_lr_eff: dict[str, float] = {}

    @classmethod
    def from_config(cls, params, cfg) -> StableAdamW:
        return cls(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay,
                   clip_rms=cfg.clip_rms, eps=cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            grads[name] = g
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            dtype = p.data.dtype
            m = (b1 * self.m[name] + (1.0 - b1) * g).astype(dtype)
            v = (b2 * self.v[name] + (1.0 - b2) * g * g).astype(dtype)
            vmax = np.maximum(self.vmax[name], (v / c2).astype(dtype))
            update = (m / c1) / (np.sqrt(vmax) + self.eps)
            rms = float(np.sqrt(np.mean(np.square(update, dtype=np.float64))))
            lr_eff = self.lr / max(1.0, rms / self.clip_rms)
            decayed = p.data * (1.0 - lr_eff * self.weight_decay)
            p.data = (decayed - lr_eff * update).astype(dtype)
            self.m[name], self.v[name], self.vmax[name] = m, v, vmax
            self.last_lr_eff[name] = lr_eff

    def state_table(self) -> dict[str, np.ndarray]:
        table = {"optimizer.t": np.array([self.t], dtype=np.float64)}
        for name in self.params:
            table[f"optimizer.m.{name}"] = self.m[name]
            table[f"optimizer.v.{name}"] = self.v[name]
            table[f"optimizer.vmax.{name}"] = self.vmax[name]
        return table

    def load_state_table(self, table: dict[str, np.ndarray]) -> None:
        self.t = int(table["optimizer.t"][0])
        for name, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v), ("vmax", self.vmax)):
                arr = table[f"optimizer.{slot}.{name}"]
                if arr.shape != p.data.shape:
                    raise ContractError(f"optimizer state {slot}.{name} has shape {arr.shape}, "
                                        f"expected {p.data.shape}")
                store[name] = arr.astype(p.data.dtype, copy=True)
