import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import ols_oracle
from shiftleak.attacker import SolSeries
from shiftleak.detect import (DEFAULT_WINDOW, extrapolate, score_all_rounds, score_divergence,
                              sensitivity_table)
from shiftleak.errors import WindowError


def _series(values, start=1):
    return {start + i: float(v) for i, v in enumerate(values)}


def test_constant_and_affine_exact():
    assert extrapolate(_series([4.2] * 6), 7, 5) == pytest.approx(4.2, abs=1e-15)
    line = _series([3 - 0.5 * t for t in range(1, 11)])
    for e in range(2, 9):
        assert extrapolate(line, 10, e) == pytest.approx(3 - 0.5 * 10, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-1e3, 1e3), b=st.floats(-1e2, 1e2), e=st.integers(2, 10))
def test_affine_exact_property(a, b, e):
    s = {t: a + b * t for t in range(1, e + 2)}
    assert extrapolate(s, e + 1, e) == pytest.approx(a + b * (e + 1), abs=1e-9 * (1 + abs(a) + abs(b)))


def test_noisy_line_matches_normal_equations(rng):
    for _ in range(50):
        ys = 2.0 + 0.3 * np.arange(1, 9) + rng.standard_normal(8)
        s = _series(ys)
        for e in (3, 5, 7):
            pred, rmse = ols_oracle(list(range(8 - e + 1, 9)), ys[8 - e:], 9)
            s[9] = pred + 1.0
            rep = score_divergence(s, 9, e)
            assert rep.expected == pytest.approx(pred, abs=1e-10)
            assert rep.divergence == pytest.approx(1.0, abs=1e-10)
            assert rep.z_score == pytest.approx(1.0 / max(rmse, 1e-12), rel=1e-9)


def test_measured_equals_expected():
    s = _series([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    rep = score_divergence(s, 6, 5)
    assert rep.divergence == pytest.approx(0.0, abs=1e-12) and rep.z_score == pytest.approx(0.0, abs=1e-9)


def test_window_errors():
    s = _series([1.0, 2.0, 3.0])
    with pytest.raises(WindowError):
        extrapolate(s, 4, 5)
    with pytest.raises(WindowError):
        score_divergence(s, 4, 1)
    with pytest.raises(WindowError):
        score_divergence(s, 5, 3)  # no measured value at round 5


def test_step_of_ten_sigma_flagged(rng):
    # a 10 sigma step on flat noise; the window's own noise makes this a rate, not a certainty
    hits = 0
    for _ in range(2000):
        ys = rng.standard_normal(6) * 0.1
        ys[-1] += 1.0
        hits += score_divergence(_series(ys), 6, 5).z_score >= 5
    assert hits / 2000 > 0.8


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-1e3, 1e3))
def test_level_invariance(seed, c):
    ys = np.random.default_rng(seed).standard_normal(7)
    a = score_divergence(_series(ys), 7, 5)
    b = score_divergence(_series(ys + c), 7, 5)
    assert b.divergence == pytest.approx(a.divergence, abs=1e-9)
    assert b.z_score == pytest.approx(a.z_score, rel=1e-6, abs=1e-6)


def _null_z(e, trials, rng):
    z = np.empty(trials)
    for i in range(trials):
        z[i] = score_divergence(_series(rng.standard_normal(e + 1)), e + 1, e).z_score
    return z


def _analytic_exceed(threshold, e):
    """P(z > threshold) for white noise: z / sqrt(k) is |t| with e - 2 dof."""
    t = np.arange(e, dtype=np.float64)
    k = 1 + 1 / e + (e - t.mean()) ** 2 / ((t - t.mean()) ** 2).sum()
    return 2 * stats.t.sf(threshold / math.sqrt(k), e - 2)


@pytest.mark.parametrize("e", [4, 5, 8])
def test_null_z_matches_t_distribution(e):
    rng = np.random.default_rng(e)
    z = _null_z(e, 20000, rng)
    for thr in (2.0, 3.0, 5.0):
        p = _analytic_exceed(thr, e)
        tol = 4 * math.sqrt(p * (1 - p) / len(z))
        assert abs((z > thr).mean() - p) < tol


@pytest.mark.xfail(strict=True, reason="with e=5 the prediction-error z follows a scaled t(3) "
                   "law; P(z>3) is about 13%, not below 2% (see test_null_z_matches_t_distribution)")
def test_null_z_exceeds_three_rarely():
    z = _null_z(DEFAULT_WINDOW, 1000, np.random.default_rng(0))
    assert (z > 3).mean() < 0.02


@pytest.mark.xfail(strict=True, reason="noisy continuing lines: P(z<2) is about 0.73 at e=5, "
                   "the same t-law as pure noise")
def test_noisy_line_continuing_rarely_scores_two():
    rng = np.random.default_rng(1)
    zs = [score_divergence(_series(1 + 0.2 * np.arange(6) + 0.05 * rng.standard_normal(6)),
                           6, 5).z_score for _ in range(1000)]
    assert np.mean(np.array(zs) < 2) >= 0.99


def test_exact_line_continuing_scores_zero():
    for slope in (-3.0, 0.0, 0.7):
        rep = score_divergence(_series(1 + slope * np.arange(6)), 6, 5)
        assert rep.z_score < 2


def test_score_all_rounds_coverage():
    s = SolSeries("gradients", "cosine", "full", _series(np.arange(10.0), start=3))
    reps = score_all_rounds(s, 5)
    assert [r.round for r in reps] == list(range(8, 13))
    assert all(r.series_id == "gradients/cosine/full" for r in reps)


def test_sensitivity_table_diagonal_and_lag():
    vals = np.array([1.0, 0.9, 0.85, 0.8, 0.78, 0.76, 0.9, 0.7])
    vl = _series(vals)
    sol = {"x/y/full": _series(vals)}
    (pt,) = sensitivity_table(sol, vl, shift_round=6, e=5, lag=1)
    assert pt.round == 7
    assert pt.sol_divergence == pt.valloss_divergence and pt.sol_z == pt.valloss_z
    assert not pt.above_diagonal
    with pytest.raises(WindowError):
        sensitivity_table(sol, vl, shift_round=3, e=5)
