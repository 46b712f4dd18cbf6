"""Mini-batch RMSprop training on the MAE of the predicted glucose change."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .datapipe import WindowSample, stack_windows
from .model import Model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if not 0.0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must be in (0, 0.5)")


@dataclass
class TrainHistory:
    train_mae: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_mae)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mae", "val_mae", "seconds"])
            for k, (a, b, s) in enumerate(zip(self.train_mae, self.val_mae, self.seconds), start=1):
                w.writerow([k, repr(a), repr(b), f"{s:.3f}"])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def split(samples: Sequence[WindowSample], train_fraction: float = 0.5,
          val_fraction: float = 0.1):
    """Chronological ``(train, validation, test)``.

    The first ``train_fraction`` of the samples is the training period, whose
    last ``val_fraction`` becomes validation; the rest is test.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if not 0.0 < val_fraction < 0.5:
        raise ValueError("val_fraction must be in (0, 0.5)")
    t = [s.t_index for s in samples]
    if any(b < a for a, b in zip(t, t[1:])):
        raise ValueError("samples are not in chronological order")
    n = len(samples)
    n_period = int(round(n * train_fraction))
    n_val = int(round(n_period * val_fraction))
    parts = (samples[:n_period - n_val], samples[n_period - n_val:n_period], samples[n_period:])
    if any(len(p) == 0 for p in parts):
        raise ValueError(f"{n} samples are too few for a train/validation/test split")
    return parts


def _holdout(samples: Sequence[WindowSample], val_fraction: float):
    n_val = int(round(len(samples) * val_fraction))
    if len(samples) - n_val < 1:
        raise ValueError("no training samples")
    return samples[:len(samples) - n_val], samples[len(samples) - n_val:]


def batched_forward(model: Model, X: np.ndarray, batch: int = 2048) -> np.ndarray:
    """Inference-mode deltas in mg/dL for a stack of windows."""
    if len(X) == 0:
        return np.zeros(0)
    return np.concatenate([np.atleast_1d(model.forward(X[i:i + batch]))
                           for i in range(0, len(X), batch)])


def train(model: Model, samples: Sequence[WindowSample], config: TrainConfig | None = None):
    """Fit ``model`` in place on the training period ``samples``.

    The chronologically last ``val_fraction`` of ``samples`` is held out for
    early stopping.  Returns ``(model, history)`` with the best-validation
    weights restored.
    """
    config = config or TrainConfig()
    train_s, val_s = _holdout(list(samples), config.val_fraction)
    X, d, _, _ = stack_windows(train_s)
    Xv, dv, _, _ = stack_windows(val_s)

    rms = float(np.sqrt(np.mean(d * d)))
    model.delta_scale = rms if rms > 0 else 1.0
    target = d / model.delta_scale

    params = model.parameters()
    state = T.RmspropState(lr=config.lr, rho=config.rho, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_val, best_weights, since_best = np.inf, model.weights(), 0
    n = len(X)
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = T.Tape()
            out = model.forward_raw(X[idx], training=True, rng=rng, tape=tape)
            loss = T.mae_loss(out, target[idx], tape=tape)
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1}", history)
            grads = T.backward(tape, loss, params)
            T.rmsprop_step([p.value for p in params], grads, state)
            total += lv * len(idx)
        train_mae = total / n * model.delta_scale
        if len(Xv):
            val_mae = float(np.mean(np.abs(batched_forward(model, Xv) - dv)))
        else:
            val_mae = train_mae
        if not np.isfinite(val_mae):
            raise TrainingDiverged(f"non-finite validation MAE in epoch {epoch + 1}", history)
        history.train_mae.append(train_mae)
        history.val_mae.append(val_mae)
        history.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d train %.3f val %.3f", epoch + 1, train_mae, val_mae)
        if val_mae < best_val:
            best_val, best_weights, since_best = val_mae, model.weights(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    model.set_weights(best_weights)
    return model, history
