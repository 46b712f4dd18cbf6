"""Raw CGM/meal/bolus records to normalized, windowed samples.

Pipeline: :func:`parse_csv` -> :func:`align` -> :func:`detect_outliers_and_fill`
-> :func:`gaussian_smooth` -> :func:`fit_norm_stats` -> :func:`make_windows`.

Glucose on an :class:`AlignedSeries` is stored on a binary grid of
``2**-10`` mg/dL.  Differences of two such values are exact in float64, so
the delta target and the recovery step ``base + delta`` reproduce the
reference reading bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

STEP_SECONDS = 300
KINDS = ("glucose", "meal", "bolus")
CSV_HEADER = ["timestamp", "kind", "value"]
SERIES_HEADER = ["t_index", "time", "glucose_mgdl", "carbs_g", "insulin_u", "valid"]
GLUCOSE_RANGE = (10.0, 600.0)
GLUCOSE_QUANTUM = 2.0 ** -10


class CsvFormatError(ValueError):
    """Input file violates the ``timestamp,kind,value`` contract."""


@dataclass(frozen=True)
class RawRecord:
    timestamp: float
    kind: str
    value: float
    flagged: bool = False


def quantize_glucose(values) -> np.ndarray:
    g = np.asarray(values, dtype=np.float64)
    return np.round(g / GLUCOSE_QUANTUM) * GLUCOSE_QUANTUM


@dataclass
class AlignedSeries:
    """Glucose, carbs and insulin on a uniform grid.

    ``glucose`` is NaN where no reading exists.  ``valid`` is False for
    missing, rejected or interpolated samples; those never enter a window or
    an evaluation.  Meal and insulin channels are impulse coded.
    """

    start_time: float
    glucose: np.ndarray
    carbs: np.ndarray
    insulin: np.ndarray
    valid: np.ndarray
    step: int = STEP_SECONDS

    def __post_init__(self):
        self.glucose = quantize_glucose(self.glucose)
        self.carbs = np.asarray(self.carbs, dtype=np.float64)
        self.insulin = np.asarray(self.insulin, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.glucose)
        n = len(self.glucose)
        if not (len(self.carbs) == len(self.insulin) == len(self.valid) == n):
            raise ValueError("channel lengths differ")

    @classmethod
    def from_arrays(cls, glucose, carbs=None, insulin=None, valid=None,
                    start_time: float = 0.0) -> "AlignedSeries":
        g = np.asarray(glucose, dtype=np.float64)
        zeros = np.zeros(len(g))
        return cls(start_time, g,
                   zeros if carbs is None else carbs,
                   zeros.copy() if insulin is None else insulin,
                   np.isfinite(g) if valid is None else valid)

    def __len__(self):
        return len(self.glucose)

    def replace(self, **changes) -> "AlignedSeries":
        kw = dict(start_time=self.start_time, glucose=self.glucose.copy(),
                  carbs=self.carbs.copy(), insulin=self.insulin.copy(),
                  valid=self.valid.copy(), step=self.step)
        kw.update(changes)
        return AlignedSeries(**kw)

    def slice(self, start: int, stop: int) -> "AlignedSeries":
        return AlignedSeries(self.start_time + start * self.step,
                             self.glucose[start:stop].copy(), self.carbs[start:stop].copy(),
                             self.insulin[start:stop].copy(), self.valid[start:stop].copy(),
                             self.step)

    def times(self) -> np.ndarray:
        return self.start_time + self.step * np.arange(len(self))

    def channels(self) -> np.ndarray:
        """``(N, 3)`` matrix of glucose, carbs, insulin."""
        return np.column_stack([self.glucose, self.carbs, self.insulin])

    def segments(self) -> list[tuple[int, int]]:
        """Half-open index ranges of consecutive samples that carry a glucose value."""
        return _runs(np.isfinite(self.glucose))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SERIES_HEADER)
            for k, t in enumerate(self.times()):
                g = self.glucose[k]
                w.writerow([k, _iso(t), "" if not np.isfinite(g) else repr(float(g)),
                            repr(float(self.carbs[k])), repr(float(self.insulin[k])),
                            int(self.valid[k])])


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], np.asarray(flags, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def _iso(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat()


# --------------------------------------------------------------------------
# CSV


def _parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    try:
        value = float(text)
        if math.isfinite(value):
            return value
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_csv(path) -> list[RawRecord]:
    """Read a ``timestamp,kind,value`` file, sorted by timestamp.

    Unparseable timestamps and a wrong header raise :class:`CsvFormatError`.
    Rows with an unknown kind or a bad value are skipped and reported with
    their line numbers.  Glucose outside (10, 600) mg/dL is kept but flagged.
    """
    records = []
    bad_lines = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise CsvFormatError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                bad_lines.append(line)
                continue
            ts_text, kind, val_text = (c.strip() for c in row)
            try:
                ts = _parse_timestamp(ts_text)
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{line}: unparseable timestamp {ts_text!r}") from exc
            try:
                value = float(val_text)
            except ValueError:
                bad_lines.append(line)
                continue
            if kind not in KINDS or not math.isfinite(value) or value < 0:
                bad_lines.append(line)
                continue
            flagged = kind == "glucose" and not (GLUCOSE_RANGE[0] < value < GLUCOSE_RANGE[1])
            records.append(RawRecord(ts, kind, value, flagged))
    if bad_lines:
        log.warning("%s: skipped %d malformed rows at lines %s", path, len(bad_lines), bad_lines)
    records.sort(key=lambda r: r.timestamp)
    return records


def _fmt_ts(ts: float) -> str:
    return str(int(ts)) if float(ts).is_integer() else repr(float(ts))


def write_csv(records: Iterable[RawRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([_fmt_ts(r.timestamp), r.kind, repr(float(r.value))])


# --------------------------------------------------------------------------
# alignment and cleaning


def _nearest_index(ts: float, start: float, step: int) -> int:
    # exact half-way points go to the earlier grid sample
    return int(math.ceil((ts - start) / step - 0.5))


def align(records: Sequence[RawRecord], start: float, end: float,
          step: int = STEP_SECONDS) -> AlignedSeries:
    """Snap records onto the grid ``start, start + step, ...`` (< ``end``)."""
    if not start < end:
        raise ValueError(f"start {start} must precede end {end}")
    n = int(math.ceil((end - start) / step))
    glucose = np.full(n, np.nan)
    carbs = np.zeros(n)
    insulin = np.zeros(n)
    collisions = 0
    for r in sorted(records, key=lambda r: r.timestamp):
        k = _nearest_index(r.timestamp, start, step)
        if not 0 <= k < n:
            continue
        if r.kind == "glucose":
            if r.flagged:
                continue
            if np.isfinite(glucose[k]):
                collisions += 1
            glucose[k] = r.value
        elif r.kind == "meal":
            carbs[k] += r.value
        elif r.kind == "bolus":
            insulin[k] += r.value
    if collisions:
        log.warning("%d glucose readings shared a grid sample; kept the later one", collisions)
    return AlignedSeries(float(start), glucose, carbs, insulin, np.isfinite(glucose), step)


def detect_outliers_and_fill(series: AlignedSeries, max_jump: float = 40.0,
                             max_gap: int = 6) -> AlignedSeries:
    """Reject isolated jumps, then interpolate short gaps.

    A reading is rejected when it differs by more than ``max_jump`` from each
    neighbouring reading it has (at least one neighbour required).  Gaps of
    at most ``max_gap`` samples between two readings are filled linearly;
    filled samples stay invalid.  Longer gaps stay empty and split the series
    into segments.
    """
    g = series.glucose.copy()
    have = np.isfinite(g)
    n = len(g)
    left = np.zeros(n, dtype=bool)
    right = np.zeros(n, dtype=bool)
    has_left = np.zeros(n, dtype=bool)
    has_right = np.zeros(n, dtype=bool)
    both = have[1:] & have[:-1]
    jump = np.zeros(n - 1, dtype=bool) if n < 2 else both & (np.abs(np.diff(np.where(have, g, 0.0))) > max_jump)
    has_left[1:] = both
    has_right[:-1] = both
    left[1:] = jump
    right[:-1] = jump
    outlier = have & (has_left | has_right) & (left | ~has_left) & (right | ~has_right)
    g[outlier] = np.nan
    valid = series.valid & ~outlier

    present = np.isfinite(g)
    for a, b in _runs(~present):
        if a == 0 or b == n or b - a > max_gap:
            continue
        lo, hi = g[a - 1], g[b]
        frac = np.arange(1, b - a + 1) / (b - a + 1)
        g[a:b] = lo + (hi - lo) * frac
        valid[a:b] = False
    return series.replace(glucose=g, valid=valid)


def gaussian_kernel(sigma_steps: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma_steps))
    j = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * (j / sigma_steps) ** 2)
    return w / w.sum()


def smooth_values(g, sigma_steps: float) -> np.ndarray:
    """Gaussian smoothing of a raw array; NaN marks gaps and stays NaN."""
    g = np.asarray(g, dtype=np.float64)
    if sigma_steps < 0:
        raise ValueError("sigma_steps must be >= 0")
    if sigma_steps == 0:
        return g.copy()
    w = gaussian_kernel(sigma_steps)
    r = len(w) // 2
    have = np.isfinite(g)
    vals = np.pad(np.where(have, g, 0.0), r)
    mask = np.pad(have.astype(np.float64), r)
    num = np.convolve(vals, w, mode="valid")
    den = np.convolve(mask, w, mode="valid")
    return np.where(have, num / np.where(den > 0, den, 1.0), np.nan)


def gaussian_smooth(series: AlignedSeries, sigma_steps: float = 1.0) -> AlignedSeries:
    """Smooth the glucose channel with a ±3σ truncated Gaussian.

    Near edges and gaps the kernel is cut to the available readings and
    renormalized.  ``sigma_steps == 0`` returns an unchanged copy.
    """
    return series.replace(glucose=smooth_values(series.glucose, sigma_steps))


# --------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Per-channel z-score parameters (glucose, carbs, insulin)."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_norm_stats(series: AlignedSeries, train_range: tuple[int, int]) -> NormStats:
    """Statistics over ``series[train_range[0]:train_range[1]]`` only.

    Channels with zero spread pass through unscaled (mean 0, std 1).
    """
    a, b = train_range
    if not 0 <= a < b <= len(series):
        raise ValueError(f"empty or out-of-bounds train range {train_range}")
    g = series.glucose[a:b]
    g = g[np.isfinite(g)]
    if g.size == 0:
        raise ValueError("no glucose readings in the training range")
    cols = [g, series.carbs[a:b], series.insulin[a:b]]
    mean = np.array([c.mean() for c in cols])
    std = np.array([c.std() for c in cols])
    for k, name in enumerate(("glucose", "carbs", "insulin")):
        if std[k] == 0:
            log.warning("%s channel is constant over the training range; passing it through", name)
            mean[k], std[k] = 0.0, 1.0
    return NormStats(mean, std)


def normalize(x, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(z, stats: NormStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


# --------------------------------------------------------------------------
# windows


@dataclass
class WindowSample:
    input: np.ndarray  # (window, 3), normalized
    target_delta: float  # mg/dL
    base_bg: float  # mg/dL
    t_index: int


def make_windows(series: AlignedSeries, stats: NormStats, window: int = 24,
                 ph_steps: int = 6) -> list[WindowSample]:
    """One sample per position ``t`` whose window ``[t-window+1, t]`` and
    target ``t + ph_steps`` are all valid (stride 1)."""
    n = len(series)
    if n <= window + ph_steps - 1 or window < 1 or ph_steps < 1:
        return []
    feats = normalize(series.channels(), stats)
    bad = (~series.valid).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(bad)])
    t = np.arange(window - 1, n - ph_steps)
    ok = (csum[t + 1] - csum[t + 1 - window] == 0) & series.valid[t + ph_steps]
    g = series.glucose
    samples = [WindowSample(feats[k - window + 1:k + 1], float(g[k + ph_steps] - g[k]),
                            float(g[k]), int(k))
               for k in t[ok]]
    if not samples:
        log.warning("no valid windows (series length %d)", n)
    return samples


def recover(delta_pred, base_bg):
    """Predicted level from a predicted change: ``base_bg + delta_pred``."""
    return base_bg + delta_pred


def stack_windows(samples: Sequence[WindowSample]):
    """Arrays ``(inputs, target_delta, base_bg, t_index)`` for a list of samples."""
    if not samples:
        return np.zeros((0, 0, 0)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64)
    return (np.stack([s.input for s in samples]),
            np.array([s.target_delta for s in samples]),
            np.array([s.base_bg for s in samples]),
            np.array([s.t_index for s in samples], dtype=np.int64))


def load_series(path, sigma_steps: float = 0.0, max_jump: float = 40.0,
                max_gap: int = 6) -> AlignedSeries:
    """Parse, align over the full recorded span, clean and optionally smooth."""
    records = parse_csv(path)
    gl = [r.timestamp for r in records if r.kind == "glucose"]
    if not gl:
        raise ValueError(f"{path}: no glucose records")
    start = min(gl)
    end = max(r.timestamp for r in records) + 1
    series = align(records, start, end)
    series = detect_outliers_and_fill(series, max_jump=max_jump, max_gap=max_gap)
    if sigma_steps > 0:
        series = gaussian_smooth(series, sigma_steps)
    return series
