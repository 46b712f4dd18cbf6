"""Comparison predictors: third-order ARX and the meal/insulin-aware NNPG."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datapipe import AlignedSeries, WindowSample, recover, stack_windows
from .model import Model, ModelSpec, build
from .modelfile import read_container, write_container
from .trainer import TrainConfig, batched_forward, train

ARX_ORDER = 3
ARX_RIDGE = 1e-6


@dataclass
class ArxModel:
    """``g(t+PH) = a·g(t..t-2) + b·carbs(t..t-2) + c·insulin(t..t-2) + d``."""

    coef: np.ndarray  # length 3 * ARX_ORDER + 1
    ph_steps: int

    @property
    def ar(self):
        return self.coef[:ARX_ORDER]

    @property
    def intercept(self) -> float:
        return float(self.coef[-1])

    def spec(self) -> dict:
        return {"kind": "arx", "order": ARX_ORDER, "ph_steps": int(self.ph_steps)}


def arx_rows(series: AlignedSeries, t: np.ndarray) -> np.ndarray:
    """Regressor rows for positions ``t`` (all lags must exist)."""
    lags = [t - j for j in range(ARX_ORDER)]
    cols = ([series.glucose[l] for l in lags] + [series.carbs[l] for l in lags]
            + [series.insulin[l] for l in lags] + [np.ones(len(t))])
    return np.column_stack(cols)


def _lags_valid(series: AlignedSeries, t: np.ndarray) -> np.ndarray:
    ok = t >= ARX_ORDER - 1
    for j in range(ARX_ORDER):
        ok &= series.valid[np.clip(t - j, 0, None)]
    return ok


def fit_arx(series: AlignedSeries, ph_steps: int, train_range: tuple[int, int],
            t_indices: Sequence[int] | None = None, ridge: float = ARX_RIDGE) -> ArxModel:
    """Ridge-regularized least squares on the training range.

    Rows are positions ``t`` whose lags and target ``t + ph_steps`` are valid
    and lie inside ``train_range``; ``t_indices`` restricts them further (to
    share a window stream with the other methods).
    """
    a, b = train_range
    if t_indices is None:
        t = np.arange(max(a, ARX_ORDER - 1), b - ph_steps)
    else:
        t = np.asarray(t_indices, dtype=np.int64)
        t = t[(t >= a + ARX_ORDER - 1) & (t + ph_steps < b)]
    t = t[_lags_valid(series, t) & series.valid[t + ph_steps]]
    if len(t) < 50:
        raise ValueError(f"ARX needs >= 50 valid training rows, got {len(t)}")
    X = arx_rows(series, t)
    y = series.glucose[t + ph_steps]
    A = X.T @ X + ridge * np.eye(X.shape[1])
    try:
        coef = np.linalg.solve(A, X.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError("rank-deficient ARX design") from exc
    if not np.all(np.isfinite(coef)):
        raise ValueError("rank-deficient ARX design")
    return ArxModel(coef, int(ph_steps))


def predict_arx(model: ArxModel, series: AlignedSeries, t) -> float | None:
    """Level forecast for ``t + ph_steps`` made at ``t``; None if a lag is invalid."""
    out = predict_arx_many(model, series, [t])[0]
    return None if np.isnan(out) else float(out)


def predict_arx_many(model: ArxModel, series: AlignedSeries, t_indices) -> np.ndarray:
    t = np.asarray(t_indices, dtype=np.int64)
    out = np.full(len(t), np.nan)
    ok = _lags_valid(series, t) & (t < len(series))
    if ok.any():
        out[ok] = arx_rows(series, t[ok]) @ model.coef
    return out


def save_arx(model: ArxModel, path) -> None:
    write_container(path, "arx", model.spec(), {"coef": model.coef})


def load_arx(path) -> ArxModel:
    header, arrays = read_container(path, kind="arx")
    return ArxModel(arrays["coef"], int(header["spec"]["ph_steps"]))


# --------------------------------------------------------------------------
# NNPG


def nnpg_spec(ph_steps: int = 6, window: int = 24) -> ModelSpec:
    spec = ModelSpec.nnpg(ph_steps=ph_steps)
    if window != spec.window:
        spec = ModelSpec(**{**spec.to_dict(), "window": window})
    return spec


def fit_nnpg(samples: Sequence[WindowSample], ph_steps: int = 6,
             config: TrainConfig | None = None, seed: int = 0):
    """Build and train the baseline network.  Returns ``(model, history)``."""
    window = samples[0].input.shape[0] if samples else 24
    model = build(nnpg_spec(ph_steps, window), seed)
    return train(model, samples, config)


def predict_nnpg(model: Model, samples: Sequence[WindowSample]) -> np.ndarray:
    """Absolute glucose forecasts (mg/dL) for a list of windows."""
    X, _, base, _ = stack_windows(samples)
    return recover(batched_forward(model, X), base)
