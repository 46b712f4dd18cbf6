"""Forecast accuracy, glycaemic-event detection and effective horizon."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

STEP_MIN = 5
HYPO_MGDL = 70.0
HYPER_MGDL = 180.0
PERSISTENCE = 4  # samples, 4 x 5 min = 20 min
LEAD_STEPS = 2  # 10 min early still counts

REPORT_COLUMNS = ["subject", "method", "ph_min", "rmse", "mard", "mcc_hyper", "mcc_hypo", "ph_eff_min"]
METRIC_LABELS = {"rmse": "RMSE", "mard": "MARD", "mcc_hyper": "MCC hyper",
                 "mcc_hypo": "MCC hypo", "ph_eff_min": "Time"}


@dataclass
class ForecastTrace:
    """Reference and prediction aligned on the target time.

    ``prediction[k]`` is the forecast of ``reference[k]`` issued ``ph_steps``
    samples earlier (NaN if none was issued).  Only indices with
    ``eval_mask`` set are ever read by a metric.
    """

    reference: np.ndarray
    prediction: np.ndarray
    eval_mask: np.ndarray
    ph_steps: int

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=np.float64)
        self.prediction = np.asarray(self.prediction, dtype=np.float64)
        mask = np.asarray(self.eval_mask, dtype=bool)
        if not (self.reference.shape == self.prediction.shape == mask.shape):
            raise ValueError("reference, prediction and mask lengths differ")
        with np.errstate(invalid="ignore"):
            self.eval_mask = mask & np.isfinite(self.reference) & np.isfinite(self.prediction)

    @property
    def ph_min(self) -> int:
        return self.ph_steps * STEP_MIN

    @property
    def n_eval(self) -> int:
        return int(self.eval_mask.sum())

    def _pairs(self):
        m = self.eval_mask
        if not m.any():
            raise ValueError("trace has no evaluated samples")
        return self.reference[m], self.prediction[m]


def rmse(trace: ForecastTrace) -> float:
    y, yhat = trace._pairs()
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mard(trace: ForecastTrace) -> float:
    """Mean absolute relative difference, percent."""
    y, yhat = trace._pairs()
    if np.any(y <= 0):
        raise ValueError("MARD needs strictly positive reference values")
    return float(np.mean(np.abs(yhat - y) / y) * 100.0)


# --------------------------------------------------------------------------
# events


class Event(NamedTuple):
    onset: int
    kind: str  # "hypo" | "hyper"
    duration: int


def _run_events(flags: np.ndarray, kind: str, persistence: int) -> list[Event]:
    padded = np.concatenate([[0], flags.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return [Event(int(a), kind, int(b - a)) for a, b in zip(edges[::2], edges[1::2])
            if b - a >= persistence]


def detect_events(values, mask=None, hypo_thresh: float = HYPO_MGDL,
                  hyper_thresh: float = HYPER_MGDL, persistence: int = PERSISTENCE) -> list[Event]:
    """Maximal runs strictly below ``hypo_thresh`` or strictly above
    ``hyper_thresh`` lasting at least ``persistence`` samples.

    Masked samples break runs and are never compared with a threshold.
    """
    v = np.asarray(values, dtype=np.float64)
    m = np.ones(len(v), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    safe = np.where(m, v, (hypo_thresh + hyper_thresh) / 2)
    events = (_run_events(m & (safe < hypo_thresh), "hypo", persistence)
              + _run_events(m & (safe > hyper_thresh), "hyper", persistence))
    return sorted(events)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")


def match_window(ph_steps: int) -> tuple[int, int]:
    """(lead, lag) in steps: a prediction may start up to ``lead`` steps
    before and ``lag`` steps after the reference onset."""
    return LEAD_STEPS, max(ph_steps - 5, 0)


def match_events(pred_events: Sequence[Event], ref_events: Sequence[Event], ph_steps: int,
                 negatives: int = 0) -> ConfusionCounts:
    """Greedy one-to-one matching of predicted to reference onsets.

    Predictions are taken in onset order; each claims the earliest unclaimed
    reference event of the same kind with ``ref - lead <= pred <= ref + lag``.
    ``negatives`` is passed through as the TN count.
    """
    lead, lag = match_window(ph_steps)
    refs = sorted(ref_events)
    claimed = [False] * len(refs)
    tp = fp = 0
    for p in sorted(pred_events):
        for j, r in enumerate(refs):
            if not claimed[j] and r.kind == p.kind and r.onset - lead <= p.onset <= r.onset + lag:
                claimed[j] = True
                tp += 1
                break
        else:
            fp += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=claimed.count(False), tn=int(negatives))


def _covered(events: Iterable[Event], n: int) -> np.ndarray:
    cov = np.zeros(n, dtype=bool)
    for e in events:
        cov[e.onset:e.onset + e.duration] = True
    return cov


def event_confusion(trace: ForecastTrace, kind: str, **thresholds) -> ConfusionCounts:
    """Confusion counts for one event kind on a trace.

    TN counts evaluated instants covered by neither a reference nor a
    predicted event of that kind.
    """
    m = trace.eval_mask
    ref = [e for e in detect_events(trace.reference, m, **thresholds) if e.kind == kind]
    pred = [e for e in detect_events(trace.prediction, m, **thresholds) if e.kind == kind]
    n = len(m)
    tn = int(np.sum(m & ~_covered(ref, n) & ~_covered(pred, n)))
    return match_events(pred, ref, trace.ph_steps, negatives=tn)


def mcc(counts: ConfusionCounts) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


# --------------------------------------------------------------------------
# effective prediction horizon


def _longest_run(mask: np.ndarray) -> int:
    padded = np.concatenate([[0], mask.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return int((edges[1::2] - edges[::2]).max()) if edges.size else 0


def lagged_correlation(trace: ForecastTrace, tau: int) -> float:
    """Pearson correlation of ``prediction[k]`` with ``reference[k - tau]``
    over indices where both are evaluated; 0 if either side is constant."""
    m = trace.eval_mask
    n = len(m)
    if tau >= n:
        return 0.0
    k = np.arange(tau, n)
    ok = m[k] & m[k - tau]
    if ok.sum() < 2:
        return 0.0
    a = trace.prediction[k[ok]]
    b = trace.reference[k[ok] - tau]
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        return 0.0
    return float(np.dot(a, b)) / den


def delay_steps(trace: ForecastTrace, min_run: int = 100) -> tuple[int, bool]:
    """Lag in ``0..ph_steps`` maximizing the cross-correlation (smallest on
    ties), and whether the correlation was identically zero."""
    if _longest_run(trace.eval_mask) < min_run:
        raise ValueError(f"effective PH needs >= {min_run} contiguous evaluated samples")
    corr = [lagged_correlation(trace, tau) for tau in range(trace.ph_steps + 1)]
    tau = int(np.argmax(corr))
    return tau, all(c == 0.0 for c in corr)


def effective_ph(trace: ForecastTrace) -> float:
    """Prediction horizon minus the estimated delay, minutes."""
    tau, _ = delay_steps(trace)
    return float(trace.ph_min - STEP_MIN * tau)


# --------------------------------------------------------------------------
# reports


def evaluate(trace: ForecastTrace, subject: str = "", method: str = "", **thresholds) -> dict:
    """One report row (see ``REPORT_COLUMNS``) plus diagnostic fields.

    ``thresholds`` are passed to :func:`detect_events`.
    """
    tau, degenerate = delay_steps(trace)
    return {
        "subject": subject,
        "method": method,
        "ph_min": trace.ph_min,
        "rmse": rmse(trace),
        "mard": mard(trace),
        "mcc_hyper": mcc(event_confusion(trace, "hyper", **thresholds)),
        "mcc_hypo": mcc(event_confusion(trace, "hypo", **thresholds)),
        "ph_eff_min": float(trace.ph_min - STEP_MIN * tau),
        "n_eval": trace.n_eval,
        "n_masked": int(len(trace.eval_mask) - trace.n_eval),
        "degenerate_delay": degenerate,
    }


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean and sample standard deviation across subjects per (method, PH).

    Rows holding NaN for a metric (failed cells) are left out of that
    metric's statistics.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], int(r["ph_min"])), []).append(r)
    out = []
    for (method, ph), rs in groups.items():
        entry = {"method": method, "ph_min": ph, "n_subjects": len(rs)}
        for key in METRIC_LABELS:
            vals = np.array([float(r[key]) for r in rs], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            entry[key] = float(vals.mean()) if vals.size else float("nan")
            entry[key + "_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append(entry)
    return out


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["subject"], r["method"], int(r["ph_min"])]
                       + [repr(float(r[k])) for k in REPORT_COLUMNS[3:]])


SUMMARY_COLUMNS = (["method", "ph_min", "n_subjects"]
                   + [c for k, label in METRIC_LABELS.items() for c in (label, label + " std")])


def write_summary_csv(summary: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summary:
            row = [s["method"], s["ph_min"], s["n_subjects"]]
            for k in METRIC_LABELS:
                row += [f"{s[k]:.6g}", f"{s[k + '_std']:.6g}"]
            w.writerow(row)


def render_table(summary: Sequence[dict]) -> str:
    """Aligned text: one block per PH, metrics as rows, methods as columns."""
    lines = []
    for ph in sorted({s["ph_min"] for s in summary}):
        block = [s for s in summary if s["ph_min"] == ph]
        header = [f"PH {ph}"] + [s["method"] for s in block]
        body = [[label] + [f"{s[k]:.2f} ± {s[k + '_std']:.2f}" for s in block]
                for k, label in METRIC_LABELS.items()]
        widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
        for r in [header] + body:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        lines.append("")
    return "\n".join(lines)
