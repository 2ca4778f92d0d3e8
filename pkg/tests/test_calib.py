import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import stats

from idsan.calib import (
    OperatingPoint,
    PrecisionWarning,
    calibrate_threshold,
    eer_threshold,
    partial_auc,
    seed_aggregate,
    tar_at_far,
    verification_rate,
    wilson_interval,
)
from idsan.errors import CalibrationLeak, EmptyImpostors, EmptyInput

scores = st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=60)


def brute_tau(imp, target):
    """Smallest candidate threshold whose FAR stays within target."""
    imp = np.asarray(imp, dtype=np.float64)
    ok = [t for t in np.unique(imp) if np.mean(imp >= t) <= target]
    return min(ok) if ok else None


def brute_pauc(mated, imp, cap):
    mated, imp = np.asarray(mated, float), np.asarray(imp, float)
    taus = np.append(np.unique(np.concatenate([mated, imp])), np.inf)
    pts = [(np.mean(imp >= t), np.mean(mated >= t)) for t in taus]
    fars = sorted({f for f, _ in pts if f < cap} | {0.0, cap})
    total = 0.0
    for a, b in zip(fars, fars[1:]):
        total += max(t for f, t in pts if f <= a) * (b - a)
    return total / cap


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=300), st.floats(1e-3, 1.0))
def test_far_target_matches_enumeration(imp, target):
    op = calibrate_threshold([0.5], imp, target, min_impostors=0)
    expected = brute_tau(imp, target)
    if expected is None:
        assert op.false_accepts == 0 and op.tau > max(imp)
    else:
        assert op.tau == expected
    assert op.achieved_far <= target


@given(st.sets(st.integers(-10**6, 10**6), min_size=1, max_size=400), st.floats(1e-3, 1.0))
def test_achieved_far_within_one_count(values, target):
    imp = np.array(sorted(values), dtype=np.float64) / 10**6
    op = calibrate_threshold([], imp, target, min_impostors=0)
    assert op.achieved_far <= target
    assert target - op.achieved_far < 1 / len(imp)


def test_fallback_accepts_only_the_top_score():
    imp = np.linspace(-1, 0.9, 6320)
    op = calibrate_threshold([0.95], imp, 1e-4)
    assert op.mode == "partial-auc-fallback"
    assert op.false_accepts == 1 and op.tau == 0.9
    assert op.min_far == pytest.approx(1.58e-4, rel=2e-3)


def test_far_target_mode_needs_ten_thousand():
    imp = np.arange(10_000) / 10_000
    op = calibrate_threshold([], imp, 1e-3)
    assert op.mode == "far-target"
    assert op.false_accepts == 10 and op.tau == imp[-10]


def test_ties_never_overshoot():
    op = calibrate_threshold([], [0.5] * 5 + [0.1] * 5, 0.3, min_impostors=0)
    assert op.false_accepts == 0


def test_tar_at_far_counts():
    op = calibrate_threshold([], [0.1, 0.2, 0.3, 0.4], 0.25, min_impostors=0)
    r = tar_at_far([0.35, 0.4, 0.5, 0.0], [0.41, 0.0], op)
    assert (r.true_accepts, r.false_accepts) == (2, 1)
    assert r.tar == 0.5 and r.far == 0.5 and r.min_far == 0.5


def test_calibration_leak_detected():
    op = OperatingPoint(0.3, 1e-3, 0.0, 0, 10, "far-target", split="test")
    with pytest.raises(CalibrationLeak):
        tar_at_far([0.5], [0.1], op)


def test_empty_impostors():
    with pytest.raises(EmptyImpostors):
        calibrate_threshold([0.5], [], 0.1)


@given(scores, scores, st.sampled_from([1e-3, 0.01, 0.1, 0.37, 1.0]))
def test_partial_auc_matches_enumeration(mated, imp, cap):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PrecisionWarning)
        got = partial_auc(mated, imp, cap)
    assert got == pytest.approx(brute_pauc(mated, imp, cap), abs=1e-12)


def test_partial_auc_fixtures():
    assert partial_auc([2.0, 3.0], [0.0, 1.0], 1.0) == 1.0
    assert partial_auc([0.0], [1.0, 2.0], 1.0) == 0.0
    # one impostor above both mated scores: TAR = 0 until FAR = 1/2, then 1
    assert partial_auc([1.0, 1.5], [2.0, 0.0], 1.0) == pytest.approx(0.5)
    with pytest.warns(PrecisionWarning):
        partial_auc([1.0], [0.0, 2.0], 1e-3)


def test_eer_symmetric_fixture():
    op = eer_threshold([0.6, 0.7, 0.8, 0.3], [0.1, 0.2, 0.4, 0.9])
    far = np.mean(np.array([0.1, 0.2, 0.4, 0.9]) >= op.tau)
    frr = np.mean(np.array([0.6, 0.7, 0.8, 0.3]) < op.tau)
    assert far == frr == 0.25
    assert op.mode == "min-eer"


def test_eer_separable_sits_in_gap():
    op = eer_threshold([0.8, 0.9], [0.1, 0.2])
    assert 0.2 < op.tau <= 0.8 and op.false_accepts == 0
    assert op.tau == pytest.approx(0.5)


def wilson_closed(k, n, z=stats.norm.ppf(0.975)):
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return centre - half, centre + half


@pytest.mark.parametrize("k,n", [(0, 200), (134, 200), (200, 200), (3, 7)])
def test_wilson_closed_form(k, n):
    lo, hi = wilson_interval(k, n)
    elo, ehi = wilson_closed(k, n)
    assert lo == pytest.approx(max(0.0, elo), abs=1e-12)
    assert hi == pytest.approx(min(1.0, ehi), abs=1e-12)


def test_wilson_zero_successes():
    lo, hi = wilson_interval(0, 200)
    assert lo == 0.0 and round(100 * hi, 2) == 1.88


@given(st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_wilson_brackets_proportion(kn):
    k, n = kn
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1


def test_verification_rate_percent():
    rate, (lo, hi) = verification_rate(np.r_[np.ones(134), np.zeros(66)], 0.5)
    assert rate == pytest.approx(67.0)
    assert lo < 67.0 < hi
    with pytest.raises(EmptyInput):
        verification_rate([], 0.5)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12))
def test_seed_aggregate_t(values):
    assume(np.std(values) > 1e-9)
    r = seed_aggregate(values)
    lo, hi = stats.t.interval(0.95, len(values) - 1, loc=np.mean(values), scale=stats.sem(values))
    assert r.ci_low == pytest.approx(max(lo, 0.0), abs=1e-12)
    assert r.ci_high == pytest.approx(min(hi, 1.0), abs=1e-12)


def test_seed_aggregate_single_and_bootstrap():
    assert seed_aggregate([0.4]).ci_defined is False
    r = seed_aggregate([0.1, 0.2, 0.3, 0.4], method="bootstrap")
    assert r.ci_low <= r.tar <= r.ci_high
    assert r == seed_aggregate([0.1, 0.2, 0.3, 0.4], method="bootstrap")
    with pytest.raises(ValueError):
        seed_aggregate([0.1, 0.2], method="jackknife")
