import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adafed.metrics import FairnessReport, fairness_report, tail_count

accs = st.lists(st.floats(0.01, 1.0), min_size=1, max_size=40)


def test_uniform_vector():
    r = fairness_report([0.8] * 10)
    assert r.mean_accuracy == pytest.approx(0.8)
    assert r.std_accuracy == pytest.approx(0.0, abs=1e-15)
    assert r.angle_degrees == pytest.approx(0.0, abs=1e-6)
    assert r.kl_to_uniform == pytest.approx(0.0, abs=1e-15)
    assert r.worst_k_pct == pytest.approx(0.8) and r.best_k_pct == pytest.approx(0.8)


def test_angle_of_unit_vector():
    assert fairness_report([1.0, 0.0]).angle_degrees == pytest.approx(45.0)


def test_two_point_example():
    r = fairness_report([0.5, 1.0], k_pct=50)
    assert (r.worst_k_pct, r.best_k_pct) == (0.5, 1.0)
    assert r.mean_accuracy == 0.75 and r.std_accuracy == 0.25


def test_zero_entry_uses_zero_log_zero_convention():
    r = fairness_report([0.0, 0.5, 0.5])
    assert r.kl_to_uniform == pytest.approx(math.log(3) - math.log(2))


def test_tail_rounding_is_ceiling():
    assert tail_count(31, 10) == 4
    assert tail_count(20, 10) == 2
    assert tail_count(3, 10) == 1


def test_errors():
    with pytest.raises(ValueError):
        fairness_report([])
    with pytest.raises(ValueError):
        fairness_report([0.0, 0.0])
    with pytest.raises(ValueError):
        fairness_report([0.5], k_pct=0)
    with pytest.raises(ValueError):
        fairness_report([0.5], k_pct=60)


def test_serialization():
    r = fairness_report([0.25, 0.5, 1.0])
    assert FairnessReport.csv_header() == [
        "mean_accuracy", "std_accuracy", "worst_k_pct", "best_k_pct", "angle_degrees", "kl_to_uniform"]
    assert [float(x) for x in r.csv_row()] == list(r.to_dict().values())


@given(accs, st.randoms(use_true_random=False))
def test_permutation_invariance(a, rnd):
    b = list(a)
    rnd.shuffle(b)
    ra, rb = fairness_report(a), fairness_report(b)
    for k, v in ra.to_dict().items():
        assert rb.to_dict()[k] == pytest.approx(v, abs=1e-12)


@given(accs)
def test_ordering_and_ranges(a):
    r = fairness_report(a)
    assert r.worst_k_pct <= r.mean_accuracy + 1e-12
    assert r.mean_accuracy <= r.best_k_pct + 1e-12
    assert r.std_accuracy >= 0 and r.kl_to_uniform >= 0
    assert 0 <= r.angle_degrees <= 90


@given(accs, st.floats(0.05, 1.0))
def test_scale_behavior(a, c):
    r = fairness_report(a)
    s = fairness_report([c * x for x in a])
    assert s.angle_degrees == pytest.approx(r.angle_degrees, abs=1e-6)
    assert s.kl_to_uniform == pytest.approx(r.kl_to_uniform, abs=1e-12)
    for f in ("mean_accuracy", "std_accuracy", "worst_k_pct", "best_k_pct"):
        assert getattr(s, f) == pytest.approx(c * getattr(r, f), rel=1e-9, abs=1e-12)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=20))
def test_zero_spread_equivalences(a):
    r = fairness_report(a)
    spread = max(a) - min(a)
    if spread == 0:
        assert r.std_accuracy == 0 and r.kl_to_uniform == 0
    elif spread > 1e-6:
        assert r.std_accuracy > 0 and r.kl_to_uniform > 0 and r.angle_degrees > 0


def test_population_std():
    a = np.array([0.1, 0.4, 0.9, 0.6])
    assert fairness_report(a).std_accuracy == pytest.approx(a.std(ddof=0))
