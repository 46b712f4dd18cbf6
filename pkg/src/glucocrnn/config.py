"""Run configuration shared by every CLI command (JSON, flat keys)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .model import ModelSpec
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # data
    ph_min: int = 30  # 30 or 60
    window: int = 24  # samples, 2 hours
    train_fraction: float = 0.5  # first half of each subject trains
    train_months: float | None = None  # None = whole training half; else 30-day months before the split
    smooth_sigma: float = 0.0  # Gaussian sigma in samples, 0 = off
    max_jump: float = 40.0  # mg/dL per 5 min
    max_gap: int = 6  # samples interpolated at most
    # model
    variant: str = "crnn"
    dropout: float = 0.2
    model_seed: int = 0
    # trainer
    batch_size: int = 128
    max_epochs: int = 200
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    patience: int = 10
    val_fraction: float = 0.1
    train_seed: int = 0
    # baselines
    arx_ridge: float = 1e-6
    # metrics
    hypo_mgdl: float = 70.0
    hyper_mgdl: float = 180.0
    persistence: int = 4
    # simulator
    cgm_noise_sd: float = 2.0
    cgm_noise_ar: float = 0.0

    def __post_init__(self):
        if self.ph_min % 5 or self.ph_min <= 0:
            raise ValueError("ph_min must be a positive multiple of 5")
        if self.train_months is not None and self.train_months <= 0:
            raise ValueError("train_months must be positive")

    @property
    def ph_steps(self) -> int:
        return self.ph_min // 5

    @property
    def train_days(self) -> int | None:
        return None if self.train_months is None else int(round(30 * self.train_months))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def updated(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**asdict(self), **{k: v for k, v in changes.items() if v is not None}})

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs, lr=self.lr,
                           rho=self.rho, eps=self.eps, patience=self.patience,
                           val_fraction=self.val_fraction, seed=self.train_seed)

    def model_spec(self, variant: str | None = None) -> ModelSpec:
        variant = variant or self.variant
        if variant == "nnpg":
            spec = ModelSpec.nnpg(ph_steps=self.ph_steps)
            return ModelSpec(**{**spec.to_dict(), "window": self.window})
        return ModelSpec(variant=variant, window=self.window, dropout=self.dropout,
                         ph_steps=self.ph_steps)

    def thresholds(self) -> dict:
        return {"hypo_thresh": self.hypo_mgdl, "hyper_thresh": self.hyper_mgdl,
                "persistence": self.persistence}
