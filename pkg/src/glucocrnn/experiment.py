"""Per-subject train/evaluate harness shared by the CLI and the acceptance runs.

Every method sees the same window stream: networks consume the windows,
ARX reads the last three samples of each window from the series, so the
set of evaluated prediction instants is identical across methods.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import baselines, metrics
from .config import RunConfig
from .datapipe import (AlignedSeries, NormStats, WindowSample, fit_norm_stats, make_windows,
                       recover, stack_windows)
from .model import Model, build
from .trainer import TrainHistory, batched_forward, train

log = logging.getLogger(__name__)

METHODS = ("crnn", "crnn-no-cnn", "crnn-no-lstm", "arx", "nnpg")
SAMPLES_PER_DAY = 288


@dataclass
class SubjectData:
    series: AlignedSeries
    ph_steps: int
    stats: NormStats
    train: list  # training-period windows (validation tail included)
    test: list
    train_range: tuple[int, int]
    test_start: int


def prepare(series: AlignedSeries, ph_steps: int, window: int = 24, train_fraction: float = 0.5,
            train_days: int | None = None) -> SubjectData:
    """Split the series in time at ``train_fraction`` and build windows.

    With ``train_days`` only that many days immediately before the split
    train; the test half is unchanged, so runs with different training
    lengths share one test set.
    """
    n = len(series)
    s = int(n * train_fraction)
    a = 0 if train_days is None else max(0, s - train_days * SAMPLES_PER_DAY)
    stats = fit_norm_stats(series, (a, s))
    samples = make_windows(series, stats, window, ph_steps)
    train_s = [x for x in samples if x.t_index - window + 1 >= a and x.t_index + ph_steps < s]
    test_s = [x for x in samples if x.t_index >= s]
    if not train_s or not test_s:
        raise ValueError(f"not enough valid windows (train {len(train_s)}, test {len(test_s)})")
    return SubjectData(series, ph_steps, stats, train_s, test_s, (a, s), s)


class Predictor:
    """Absolute glucose forecasts for a list of windows."""

    method = ""

    def predict(self, data: SubjectData, samples: Sequence[WindowSample]) -> np.ndarray:
        raise NotImplementedError


@dataclass
class NetworkPredictor(Predictor):
    model: Model
    history: TrainHistory | None = None
    method: str = "crnn"

    def predict(self, data, samples):
        X, _, base, _ = stack_windows(samples)
        return recover(batched_forward(self.model, X), base)


@dataclass
class ArxPredictor(Predictor):
    model: baselines.ArxModel
    method: str = "arx"

    def predict(self, data, samples):
        t = np.array([s.t_index for s in samples], dtype=np.int64)
        return baselines.predict_arx_many(self.model, data.series, t)


@dataclass
class OraclePredictor(Predictor):
    """Reads the future; only for checking the evaluation path."""

    method: str = "oracle"

    def predict(self, data, samples):
        return np.array([s.base_bg + s.target_delta for s in samples])


def fit_method(method: str, data: SubjectData, cfg: RunConfig) -> Predictor:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "arx":
        t = [x.t_index for x in data.train]
        m = baselines.fit_arx(data.series, data.ph_steps, data.train_range, t_indices=t,
                              ridge=cfg.arx_ridge)
        return ArxPredictor(m)
    model = build(cfg.model_spec(method), cfg.model_seed)
    model.norm = data.stats
    model, history = train(model, data.train, cfg.train_config())
    return NetworkPredictor(model, history, method)


def forecast_trace(data: SubjectData, samples: Sequence[WindowSample],
                   predictions: np.ndarray) -> metrics.ForecastTrace:
    """Trace over the test half, indexed by target time."""
    series, s, ph = data.series, data.test_start, data.ph_steps
    n = len(series)
    pred = np.full(n - s, np.nan)
    for x, p in zip(samples, predictions):
        k = x.t_index + ph - s
        if 0 <= k < n - s:
            pred[k] = p
    return metrics.ForecastTrace(series.glucose[s:], pred, series.valid[s:], ph)


def evaluate_predictor(predictor: Predictor, data: SubjectData, cfg: RunConfig,
                       subject: str = "") -> tuple[dict, metrics.ForecastTrace]:
    preds = predictor.predict(data, data.test)
    trace = forecast_trace(data, data.test, preds)
    row = metrics.evaluate(trace, subject=subject, method=predictor.method, **cfg.thresholds())
    return row, trace


@dataclass
class CellResult:
    row: dict
    trace: metrics.ForecastTrace | None = None
    predictor: Predictor | None = None
    error: str | None = None


def run_cell(series: AlignedSeries, method: str, cfg: RunConfig, subject: str = "") -> CellResult:
    """Train one method on one subject and evaluate it on the test half.

    Failures are captured in the result instead of raised.
    """
    try:
        data = prepare(series, cfg.ph_steps, cfg.window, cfg.train_fraction, cfg.train_days)
        predictor = fit_method(method, data, cfg)
        row, trace = evaluate_predictor(predictor, data, cfg, subject)
        return CellResult(row, trace, predictor)
    except Exception as exc:  # recorded per cell; the sweep continues
        log.warning("cell %s/%s/%d min failed: %s", subject, method, cfg.ph_min, exc)
        row = {k: float("nan") for k in metrics.REPORT_COLUMNS}
        row.update(subject=subject, method=method, ph_min=cfg.ph_min)
        return CellResult(row, error=f"{type(exc).__name__}: {exc}")
