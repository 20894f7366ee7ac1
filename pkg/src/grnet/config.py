"""Run configuration shared by the CLI, training and evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pyramid import DEFAULT_SCALES, PyramidConfig
from .reasoning import ReasoningConfig
from .simgraph import EdgeMask

PRECISIONS = {"f64": np.float64, "f32": np.float32}


@dataclass
class RunConfig:
    scales: str = ",".join(f"{r}x{c}" for r, c in DEFAULT_SCALES)
    dim: int = 512
    hidden: int = 128
    iterations: int = 3
    edge_mode: str = "recompute"
    mask: dict = field(default_factory=lambda: EdgeMask().to_dict())
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_step_epochs: int = 20
    lr_factor: float = 10.0
    identities_per_batch: int = 32
    images_per_identity: int = 2
    neg_ratio: float = 1.0
    full_cross: bool = False
    epochs: int = 60
    steps_per_epoch: int | None = None
    seed: int = 0
    ks: tuple[int, ...] = (1, 20, 50)
    precision: str = "f64"
    val_every: int = 1

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        self.validate()

    def validate(self) -> None:
        self.pyramid()
        self.reasoning()
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.lr <= 0 or self.lr_factor <= 0 or self.lr_step_epochs < 1:
            raise ConfigError("lr, lr_factor and lr_step_epochs must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay >= 0")
        if self.identities_per_batch < 2:
            raise ConfigError("identities_per_batch must be >= 2 to form negatives")
        if self.images_per_identity < 2 or self.images_per_identity % 2:
            raise ConfigError("images_per_identity must be an even number >= 2")
        if self.neg_ratio < 0:
            raise ConfigError("neg_ratio must be >= 0")
        if self.epochs < 0 or (self.steps_per_epoch is not None and self.steps_per_epoch < 1):
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("report ks must be positive")

    def pyramid(self) -> PyramidConfig:
        cfg = PyramidConfig.parse(self.scales)
        if not cfg.has_global:
            raise ConfigError(f"the first scale must be 1x1, got {cfg}")
        return cfg

    def reasoning(self) -> ReasoningConfig:
        return ReasoningConfig(self.iterations, self.hidden, self.dim, self.edge_mode,
                               EdgeMask.from_dict(self.mask))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
