"""Full model: prior gate -> frozen backbone -> amplification -> decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aam import AamParams, AamTrace, aam_forward
from .backbone import BackboneWeights, encode, group_features, patchify
from .cfl import LossReport, cross_feature_loss, plain_alignment_loss
from .config import RunConfig
from .decoder import DecoderParams, decode
from .prior_gate import GateTrace, PriorGateParams, prior_forward
from .tensor import Tensor


@dataclass
class ForwardOutput:
    fe1: Tensor
    fe2: Tensor
    f1: Tensor
    f2: Tensor
    f_i: Tensor
    f_m: Tensor
    grid: tuple[int, int]
    gate: GateTrace | None = None
    aam: AamTrace | None = None


class Model:
    def __init__(self, cfg: RunConfig, prior: PriorGateParams, backbone: BackboneWeights,
                 aam: AamParams, decoder: DecoderParams):
        self.cfg = cfg
        self.backbone_cfg = cfg.model.backbone()
        self.prior = prior
        self.backbone = backbone
        self.aam = aam
        self.decoder = decoder

    @classmethod
    def init(cls, cfg: RunConfig, dtype=None) -> Model:
        m = cfg.model
        rng = np.random.default_rng([cfg.train.seed, 1])
        prior = PriorGateParams.init(m.channels, dtype=dtype)
        backbone = BackboneWeights.synthesize(m.backbone(), dtype=dtype)
        aam = AamParams.init(rng, m.embed_dim, m.heads, std=m.aam_init_std,
                             temp_init=cfg.aam.temp_init, bias=cfg.aam.bias, dtype=dtype)
        decoder = DecoderParams.init(rng, m.embed_dim, m.decoder_depth, m.heads, m.mlp_ratio, dtype=dtype)
        return cls(cfg, prior, backbone, aam, decoder)

    @classmethod
    def from_table(cls, cfg: RunConfig, table: dict[str, np.ndarray], dtype=None) -> Model:
        m = cfg.model
        tensors = {}
        for name, arr in table.items():
            if name.startswith("optimizer."):
                continue
            frozen = name.startswith("backbone.")
            tensors[name] = Tensor(arr, requires_grad=not frozen, dtype=dtype)
        prior = PriorGateParams(gamma=tensors["prior_gate.gamma"])
        backbone = BackboneWeights.from_named(tensors, m.depth)
        aam = AamParams.from_named(tensors)
        decoder = DecoderParams.from_named(tensors, m.decoder_depth, m.heads)
        return cls(cfg, prior, backbone, aam, decoder)

    def named(self) -> dict[str, Tensor]:
        table = dict(self.prior.named())
        table.update(self.backbone.named())
        table.update(self.aam.named())
        table.update(self.decoder.named())
        return table

    def trainable(self) -> dict[str, Tensor]:
        """Tensors the optimizer updates under the current toggles."""
        tg = self.cfg.toggles
        table = {}
        if tg.sfe_enabled:
            table.update(self.prior.named())
        if tg.aam_enabled:
            table.update(self.aam.named())
        table.update(self.decoder.named())
        return table

    def encoder_features(self, images: Tensor):
        cfg = self.backbone_cfg
        gate = None
        x = images
        if self.cfg.toggles.sfe_enabled:
            x, gate = prior_forward(images, self.prior)
        blocks = encode(patchify(x, cfg, self.backbone), cfg, self.backbone)
        return blocks, group_features(blocks, cfg), gate

    def bottleneck(self, f_i: Tensor) -> tuple[Tensor, AamTrace | None]:
        if not self.cfg.toggles.aam_enabled:
            return f_i, None
        if not self.cfg.aam.joint_views:
            return aam_forward(f_i, self.aam, residual=self.cfg.aam.residual)
        b, n, d = f_i.shape
        views = self.cfg.data.views
        joint = f_i.reshape(b // views, views * n, d)
        out, trace = aam_forward(joint, self.aam, residual=self.cfg.aam.residual)
        return out.reshape(b, n, d), trace

    def forward(self, images: Tensor) -> ForwardOutput:
        if self.cfg.toggles.sfe_enabled and T.is_grad_enabled():
            blocks, pair, gate = self.encoder_features(images)
        else:
            with T.no_grad():
                blocks, pair, gate = self.encoder_features(images)
        f_i = blocks[-1]
        f_m, trace = self.bottleneck(f_i)
        f1, f2 = decode(f_m, self.decoder)
        fe1, fe2 = pair.fe1, pair.fe2
        if self.cfg.cfl.detach_targets:
            fe1, fe2 = fe1.detach(), fe2.detach()
        return ForwardOutput(fe1=fe1, fe2=fe2, f1=f1, f2=f2, f_i=f_i, f_m=f_m,
                             grid=pair.grid, gate=gate, aam=trace)

    def loss(self, out: ForwardOutput) -> tuple[Tensor, LossReport]:
        if self.cfg.toggles.cfl_enabled:
            return cross_feature_loss(out.fe1, out.fe2, out.f1, out.f2,
                                      fraction=self.cfg.cfl.mining_fraction,
                                      invert_mining=self.cfg.cfl.invert_mining)
        return plain_alignment_loss(out.fe1, out.fe2, out.f1, out.f2)
