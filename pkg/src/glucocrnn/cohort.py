"""Synthetic type 1 diabetes subjects.

A minimal-model glucose/insulin system with two-compartment gut absorption,
two-compartment subcutaneous insulin absorption, a daily insulin-sensitivity
rhythm and transient exercise-driven sensitivity boosts.  Integrated with
fixed-step RK4 at 1 minute; CGM is read every 5 minutes with additive noise.

State (per minute):

    dQ1 = -Q1/tau_m                      gut, mg (meal impulse lands in Q1)
    dQ2 = (Q1 - Q2)/tau_m
    dS1 = -S1/tau_i                      subcutaneous insulin, U
    dS2 = (S1 - S2)/tau_i
    dI  = 1000*S2/(tau_i*V_I*BW) - k_e*I plasma insulin above basal, mU/L
    dX  = -p2*X + p2*S_I(t)*I            remote insulin action, 1/min
    dG  = -S_G*(G - G_b) - X*G + f*Q2/(tau_m*V_G*BW)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import RawRecord, write_csv

log = logging.getLogger(__name__)

EPOCH_START = 1577836800  # 2020-01-01T00:00:00Z
MINUTES_PER_DAY = 1440
CGM_EVERY = 5
G_MIN, G_MAX = 40.0, 400.0

# fixed physiology
BIOAVAILABILITY = 0.8
V_G = 1.6  # dL/kg
V_I = 0.12  # L/kg
K_E = 0.138  # 1/min

# (low, high) sampling ranges, uniform
PARAM_RANGES = {
    "insulin_sensitivity": (3.0e-4, 8.0e-4),  # 1/min per mU/L
    "glucose_effectiveness": (0.008, 0.02),  # 1/min
    "insulin_action_rate": (0.015, 0.03),  # p2, 1/min
    "meal_absorption_min": (35.0, 70.0),
    "insulin_absorption_min": (45.0, 75.0),
    "basal_glucose": (100.0, 150.0),  # mg/dL
    "body_weight": (55.0, 95.0),  # kg
    "sensitivity_amplitude": (0.05, 0.25),  # fraction
    "sensitivity_phase": (0.0, 2 * math.pi),  # rad
    "carb_ratio_error": (0.75, 1.25),  # multiplier on the ideal ratio
}


@dataclass(frozen=True)
class SubjectParams:
    insulin_sensitivity: float
    glucose_effectiveness: float
    insulin_action_rate: float
    meal_absorption_min: float
    insulin_absorption_min: float
    basal_glucose: float
    body_weight: float
    sensitivity_amplitude: float
    sensitivity_phase: float
    carb_ratio_error: float
    cgm_noise_sd: float = 2.0  # mg/dL
    cgm_noise_ar: float = 0.0  # AR(1) coefficient
    seed: int = 0

    @property
    def insulin_per_unit_effect(self) -> float:
        """Approximate mg/dL drop per unit of insulin at 150 mg/dL."""
        exposure = 1000.0 / (V_I * self.body_weight * K_E)
        return self.insulin_sensitivity * exposure * 150.0

    @property
    def carb_ratio(self) -> float:
        """Grams of carbohydrate covered by one unit of insulin (as dosed)."""
        rise_per_gram = 1000.0 * BIOAVAILABILITY / (V_G * self.body_weight)
        return self.carb_ratio_error * 1.1 * self.insulin_per_unit_effect / rise_per_gram

    @property
    def correction_factor(self) -> float:
        """mg/dL lowered by one correction unit, as the subject believes."""
        return 1.2 * self.insulin_per_unit_effect


def sample_subject(seed: int, cgm_noise_sd: float = 2.0, cgm_noise_ar: float = 0.0) -> SubjectParams:
    rng = np.random.default_rng([int(seed), 0x5EED])
    drawn = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES.items()}
    return SubjectParams(**drawn, cgm_noise_sd=cgm_noise_sd, cgm_noise_ar=cgm_noise_ar, seed=int(seed))


@dataclass
class DayProtocol:
    """Planned events for one day, minutes from midnight.

    ``correction_checks`` are times at which the subject looks at their
    glucose and takes a correction bolus if it is high.
    """

    meals: list = field(default_factory=list)  # (minute, grams)
    boluses: list = field(default_factory=list)  # (minute, units)
    correction_checks: list = field(default_factory=list)  # minute
    exercise: tuple | None = None  # (start minute, duration, sensitivity factor)


MEAL_SLOTS = ((450, 40, 45.0), (750, 40, 60.0), (1140, 45, 70.0))  # centre, jitter, median g


def make_protocol(params: SubjectParams, days: int, seed: int) -> list[DayProtocol]:
    """Three meals a day, one to five boluses, daytime exercise now and then."""
    rng = np.random.default_rng([int(seed), 0xD1E7])
    plan = []
    for _ in range(days):
        day = DayProtocol()
        for centre, jitter, median in MEAL_SLOTS:
            minute = int(centre + rng.integers(-jitter, jitter + 1))
            grams = float(np.clip(median * rng.lognormal(0.0, 0.3), 10.0, 150.0))
            day.meals.append((minute, round(grams, 1)))
        bolused = rng.random(3) < 0.9
        if not bolused.any():
            bolused[rng.integers(3)] = True
        for (minute, grams), take in zip(day.meals, bolused):
            if take:
                units = grams / params.carb_ratio * rng.lognormal(0.0, 0.2)
                offset = int(rng.integers(-10, 11))
                day.boluses.append((max(0, minute + offset), round(float(units), 2)))
        n_checks = int(rng.integers(0, 3))
        day.correction_checks = sorted(int(m) for m in rng.integers(8 * 60, 22 * 60, n_checks))
        if rng.random() < 0.3:
            day.exercise = (int(rng.integers(9 * 60, 19 * 60)), int(rng.integers(30, 61)),
                            float(rng.uniform(1.5, 2.5)))
        plan.append(day)
    return plan


class SimulationError(RuntimeError):
    pass


def integrate(params: SubjectParams, days: int, protocol: list[DayProtocol],
              corrections: bool = True) -> dict:
    """Run the ODE.  Returns per-minute glucose plus the delivered events.

    Correction boluses are only delivered when ``corrections`` is True and the
    glucose at a check time exceeds 220 mg/dL.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if len(protocol) < days:
        raise ValueError("protocol shorter than the simulated period")
    p = params
    sg, p2, gb = p.glucose_effectiveness, p.insulin_action_rate, p.basal_glucose
    tm, ti = p.meal_absorption_min, p.insulin_absorption_min
    ra_scale = BIOAVAILABILITY / (tm * V_G * p.body_weight)
    i_scale = 1000.0 / (ti * V_I * p.body_weight)
    si0, amp, phase = p.insulin_sensitivity, p.sensitivity_amplitude, p.sensitivity_phase

    n_min = days * MINUTES_PER_DAY
    meal_at = np.zeros(n_min)
    bolus_at = np.zeros(n_min)
    check_at = np.zeros(n_min, dtype=bool)
    ex_factor = np.ones(n_min)
    for d, day in enumerate(protocol[:days]):
        base = d * MINUTES_PER_DAY
        for m, grams in day.meals:
            if 0 <= base + m < n_min:
                meal_at[base + m] += grams
        for m, units in day.boluses:
            if 0 <= base + m < n_min:
                bolus_at[base + m] += units
        for m in day.correction_checks:
            if 0 <= base + m < n_min:
                check_at[base + m] = True
        if day.exercise is not None:
            s, dur, fac = day.exercise
            ex_factor[base + s:min(base + s + dur, n_min)] *= fac
    rhythm = 1.0 + amp * np.sin(2 * math.pi * np.arange(n_min) / MINUTES_PER_DAY + phase)
    si_t = (si0 * rhythm * ex_factor).tolist()
    meal_l, bolus_l, check_l = meal_at.tolist(), bolus_at.tolist(), check_at.tolist()

    def deriv(q1, q2, s1, s2, ins, x, g, si):
        return (-q1 / tm, (q1 - q2) / tm, -s1 / ti, (s1 - s2) / ti,
                i_scale * s2 - K_E * ins, -p2 * x + p2 * si * ins,
                -sg * (g - gb) - x * g + ra_scale * q2)

    q1 = q2 = s1 = s2 = ins = x = 0.0
    g = gb
    out = np.empty(n_min)
    delivered = []  # (minute, kind, value)
    clipped = 0
    for k in range(n_min):
        if meal_l[k]:
            q1 += 1000.0 * meal_l[k]
            delivered.append((k, "meal", meal_l[k]))
        dose = bolus_l[k]
        if corrections and check_l[k] and g > 220.0:
            dose += round((g - 120.0) / p.correction_factor, 2)
        if dose:
            s1 += dose
            delivered.append((k, "bolus", dose))
        out[k] = g
        si = si_t[k]
        state = (q1, q2, s1, s2, ins, x, g)
        k1 = deriv(*state, si)
        k2 = deriv(*(v + 0.5 * d for v, d in zip(state, k1)), si)
        k3 = deriv(*(v + 0.5 * d for v, d in zip(state, k2)), si)
        k4 = deriv(*(v + d for v, d in zip(state, k3)), si)
        q1, q2, s1, s2, ins, x, g = (v + (a + 2 * b + 2 * c + d) / 6.0
                                     for v, a, b, c, d in zip(state, k1, k2, k3, k4))
        if not math.isfinite(g):
            raise SimulationError(f"non-finite glucose at minute {k}; parameters {asdict(p)}")
        q1, q2, s1, s2, ins, x = (max(v, 0.0) for v in (q1, q2, s1, s2, ins, x))
        if g < G_MIN or g > G_MAX:
            clipped += 1
            g = min(max(g, G_MIN), G_MAX)
    if clipped:
        log.info("subject %d: glucose clipped to [%g, %g] on %d minutes", p.seed, G_MIN, G_MAX, clipped)
    return {"glucose": out, "events": delivered, "clipped": clipped}


def simulate(params: SubjectParams, days: int, protocol: list[DayProtocol] | None = None,
             seed: int | None = None, corrections: bool = True) -> list[RawRecord]:
    """Records for ``days`` days: CGM every 5 minutes plus meals and boluses.

    ``protocol`` defaults to :func:`make_protocol` with ``seed``; ``seed``
    also drives the CGM noise.
    """
    seed = params.seed if seed is None else int(seed)
    if protocol is None:
        protocol = make_protocol(params, days, seed)
    run = integrate(params, days, protocol, corrections=corrections)
    rng = np.random.default_rng([seed, 0xC6A1])
    true_g = run["glucose"][::CGM_EVERY]
    white = rng.normal(0.0, params.cgm_noise_sd, len(true_g))
    noise = np.empty_like(white)
    phi = params.cgm_noise_ar
    prev = 0.0
    scale = math.sqrt(1.0 - phi * phi)
    for k, w in enumerate(white):
        prev = phi * prev + scale * w
        noise[k] = prev
    cgm = np.clip(true_g + noise, G_MIN, G_MAX)
    records = [RawRecord(float(EPOCH_START + 60 * CGM_EVERY * k), "glucose", round(float(v), 1))
               for k, v in enumerate(cgm)]
    records += [RawRecord(float(EPOCH_START + 60 * m), kind, float(v)) for m, kind, v in run["events"]]
    records.sort(key=lambda r: (r.timestamp, ("glucose", "meal", "bolus").index(r.kind)))
    return records


def subject_seeds(n: int, seed: int) -> list[int]:
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def generate_cohort(n_subjects: int, days: int, seed: int, out_dir,
                    cgm_noise_sd: float = 2.0, cgm_noise_ar: float = 0.0) -> list[Path]:
    """Write ``subject_XX.csv`` files and ``manifest.json`` into ``out_dir``."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"cohort_seed": int(seed), "days": int(days), "subjects": {}}
    paths = []
    for i, s in enumerate(subject_seeds(n_subjects, seed), start=1):
        params = sample_subject(s, cgm_noise_sd=cgm_noise_sd, cgm_noise_ar=cgm_noise_ar)
        records = simulate(params, days, seed=s)
        name = f"subject_{i:02d}"
        path = out / f"{name}.csv"
        write_csv(records, path)
        paths.append(path)
        manifest["subjects"][name] = {"seed": s, "file": path.name, "params": asdict(params)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return paths
