"""Run configuration. JSON files mirror ``RunConfig``; unknown keys are rejected."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from .backbone import BackboneConfig
from .errors import ConfigError, StorageError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    image_size: int = Field(32, ge=1)
    patch_size: int = Field(4, ge=1)
    channels: int = Field(3, ge=1)
    embed_dim: int = Field(64, ge=1)
    depth: int = Field(4, ge=0)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    # zero-based block indices: shallow group first
    group_split: list[list[int]] = Field(default_factory=lambda: [[0, 1], [2, 3]])
    decoder_depth: int = Field(4, ge=2)
    pos_embed: bool = True
    backbone_seed: int = 0
    # patch projection std; large enough that patch content outweighs the
    # positional table in the frozen features
    patch_std: float = Field(2.0, gt=0)
    aam_init_std: float = Field(0.125, gt=0)

    def backbone(self) -> BackboneConfig:
        try:
            return BackboneConfig(
                image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
                embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
                mlp_ratio=self.mlp_ratio, group_split=tuple(tuple(g) for g in self.group_split),
                pos_embed=self.pos_embed, seed=self.backbone_seed, patch_std=self.patch_std)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


class Toggles(_Strict):
    sfe_enabled: bool = True
    aam_enabled: bool = True
    cfl_enabled: bool = True


class AamConfig(_Strict):
    joint_views: bool = False
    residual: bool = False
    bias: bool = False
    temp_init: float = Field(1.0, gt=0)


class CflConfig(_Strict):
    mining_fraction: float = Field(0.1, gt=0, le=1)
    invert_mining: bool = False
    # stop gradients through the encoder-side targets; off by default so the
    # prior gate also learns through both feature groups
    detach_targets: bool = False


class OptimizerConfig(_Strict):
    lr: float = Field(2e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    clip_rms: float = Field(1.0, gt=0)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(_Strict):
    iterations: int = Field(500, ge=0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(100, ge=0)


class ScoringConfig(_Strict):
    # None: 4 * image_size / 392
    sigma: Optional[float] = Field(None, ge=0)
    reduction: Literal["top1", "max", "mean"] = "top1"
    top_fraction: float = Field(0.01, gt=0, le=1)


class DataConfig(_Strict):
    root: Optional[str] = None
    categories: list[str] = Field(default_factory=lambda: ["disc", "plate"])
    views: int = Field(5, ge=1)
    train_samples: int = Field(50, ge=1)
    test_normal: int = Field(20, ge=0)
    test_defective: int = Field(20, ge=0)
    seed: int = 0


class RunConfig(_Strict):
    model: ModelConfig = Field(default_factory=ModelConfig)
    toggles: Toggles = Field(default_factory=Toggles)
    aam: AamConfig = Field(default_factory=AamConfig)
    cfl: CflConfig = Field(default_factory=CflConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _consistent(self):
        self.model.backbone()
        if self.model.decoder_depth % 2:
            raise ValueError("decoder_depth must be even")
        if self.aam.joint_views and self.train.batch_size % self.data.views:
            raise ValueError("aam.joint_views needs batch_size to be a multiple of data.views")
        return self

    @property
    def sigma(self) -> float:
        if self.scoring.sigma is not None:
            return self.scoring.sigma
        return 4.0 * self.model.image_size / 392.0

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        try:
            return cls.model_validate(data)
        except PydanticError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        except ConfigError:
            raise

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def updated(self, **sections) -> RunConfig:
        """Copy with nested overrides, e.g. ``updated(train={"seed": 3})``."""
        data = self.model_dump(mode="json")
        for section, values in sections.items():
            data[section].update(values)
        return RunConfig.from_dict(data)
