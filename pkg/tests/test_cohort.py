import json

import numpy as np
import pytest

from glucocrnn import cohort as C
from glucocrnn.datapipe import parse_csv


def quiet(seed=3, **kw):
    return C.sample_subject(seed, cgm_noise_sd=0.0, **kw)


def test_sample_subject_deterministic_and_distinct():
    assert C.sample_subject(7) == C.sample_subject(7)
    seeds = C.subject_seeds(10, 0)
    si = {C.sample_subject(s).insulin_sensitivity for s in seeds}
    assert len(si) == 10


def test_params_within_ranges():
    for s in range(1000):
        p = C.sample_subject(s)
        for name, (lo, hi) in C.PARAM_RANGES.items():
            assert lo <= getattr(p, name) <= hi, name
        assert 90 <= p.basal_glucose <= 160
        assert p.carb_ratio > 0 and p.correction_factor > 0


def test_steady_state_without_inputs():
    p = quiet()
    run = C.integrate(p, 2, [C.DayProtocol(), C.DayProtocol()], corrections=False)
    assert np.all(np.abs(run["glucose"][C.MINUTES_PER_DAY:] - p.basal_glucose) <= 1.0)


def test_meal_peaks_after_it_and_returns():
    p = quiet()
    day = C.DayProtocol(meals=[(600, 60.0)])
    g = C.integrate(p, 1, [day], corrections=False)["glucose"]
    peak = int(np.argmax(g))
    assert peak > 600
    assert g[peak] > p.basal_glucose + 20
    assert abs(g[-1] - p.basal_glucose) < abs(g[peak] - p.basal_glucose)


def test_meal_and_bolus_counterfactuals():
    p = quiet()
    base = C.DayProtocol(meals=[(300, 50.0)], boluses=[(300, 3.0)])
    g0 = C.integrate(p, 1, [base], corrections=False)["glucose"]
    more_meal = C.DayProtocol(meals=[(300, 50.0), (700, 40.0)], boluses=[(300, 3.0)])
    g1 = C.integrate(p, 1, [more_meal], corrections=False)["glucose"]
    assert g1[730] > g0[730]
    more_bolus = C.DayProtocol(meals=[(300, 50.0)], boluses=[(300, 3.0), (700, 1.5)])
    g2 = C.integrate(p, 1, [more_bolus], corrections=False)["glucose"]
    assert g2[760] < g0[760]


def test_simulation_deterministic_and_bounded():
    p = C.sample_subject(11)
    a = C.simulate(p, 3, seed=5)
    b = C.simulate(p, 3, seed=5)
    assert a == b
    g = np.array([r.value for r in a if r.kind == "glucose"])
    assert len(g) == 3 * 288
    assert g.min() >= C.G_MIN and g.max() <= C.G_MAX


def test_protocol_rules():
    p = C.sample_subject(2)
    for day in C.make_protocol(p, 200, seed=2):
        assert len(day.meals) == 3
        assert 1 <= len(day.boluses) <= 3
        assert len(day.correction_checks) <= 2
        if day.exercise is not None:
            start, dur, fac = day.exercise
            assert 9 * 60 <= start and start + dur <= 20 * 60 and fac > 1


def test_integrate_rejects_bad_input():
    with pytest.raises(ValueError):
        C.integrate(quiet(), 0, [])
    with pytest.raises(ValueError):
        C.integrate(quiet(), 2, [C.DayProtocol()])


def test_generate_cohort(tmp_path):
    paths = C.generate_cohort(2, 4, seed=1, out_dir=tmp_path)
    assert [p.name for p in paths] == ["subject_01.csv", "subject_02.csv"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["subjects"]) == {"subject_01", "subject_02"}
    for path in paths:
        recs = parse_csv(path)
        assert sum(r.kind == "glucose" for r in recs) == 4 * 288
        for d in range(4):
            lo = C.EPOCH_START + d * 86400
            day = [r for r in recs if lo <= r.timestamp < lo + 86400]
            assert sum(r.kind == "meal" for r in day) == 3
            assert 1 <= sum(r.kind == "bolus" for r in day) <= 5


def test_one_day_cohort_has_three_meals(tmp_path):
    (path,) = C.generate_cohort(1, 1, seed=0, out_dir=tmp_path)
    assert sum(r.kind == "meal" for r in parse_csv(path)) == 3


def test_generate_cohort_rejects_zero(tmp_path):
    with pytest.raises(ValueError):
        C.generate_cohort(0, 1, 0, tmp_path)
