import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from biosim.fit import (
    EXP_DECAY,
    LOG_LOGISTIC,
    DegenerateDataError,
    InsufficientDataError,
    TrialSeries,
    anscombe_proportions,
    augment_origin,
    candidate_degrees,
    choose_degree,
    fit_bernstein_wls,
    fit_parametric_mle,
    fit_parametric_mle_batch,
    ks_pvalue,
    ks_statistic,
    loglik,
    select_degree_ks,
    standardized_residuals,
)
from biosim.models import (
    ORIGIN_AUGMENTED,
    RELAXED,
    STRICT,
    BernsteinCurve,
    ClosedFormCurve,
    ExpDecayParams,
    LogLogisticParams,
    bernstein_design,
)
from biosim.simlab import simulate_trial

TRUTH1 = ExpDecayParams(0.6, 0.2)
TIMES31 = np.arange(0.0, 31.0)
TIMES16 = np.arange(0.0, 31.0, 2.0)


# --- series and likelihood -----------------------------------------------------------

def test_series_validation():
    with pytest.raises(ValueError):
        TrialSeries("a", 10, (1.0, 1.0, 2.0), (1, 2, 3))
    with pytest.raises(ValueError):
        TrialSeries("a", 10, (1.0, 2.0), (11, 2))
    with pytest.raises(ValueError):
        TrialSeries("a", 0, (1.0,), (0,))


def test_loglik_examples():
    s = TrialSeries("a", 10, (1.0,), (0,))
    half = ClosedFormCurve(lambda t: 0.5 + 0 * t)
    assert loglik(s, half) == pytest.approx(10 * math.log(0.5))
    assert loglik(s, half) == pytest.approx(-6.9315, abs=1e-4)
    s3 = TrialSeries("a", 10, (1.0,), (3,))
    assert loglik(s3, ClosedFormCurve(lambda t: 0 * t)) == -math.inf


# --- parametric MLE --------------------------------------------------------------------

def test_mle_near_noiseless_recovery():
    n = 10_000
    y = np.round(n * TRUTH1(TIMES31)).astype(int)
    fit = fit_parametric_mle(TrialSeries("a", n, tuple(TIMES31), tuple(y)), EXP_DECAY)
    assert fit.params.alpha == pytest.approx(0.6, abs=0.01)
    assert fit.params.beta == pytest.approx(0.2, abs=0.01)
    assert fit.converged
    assert np.all(np.isfinite(fit.se)) and min(fit.se) > 0


def test_mle_degenerate_data():
    zeros = TrialSeries("a", 50, tuple(TIMES16), (0,) * 16)
    with pytest.raises(DegenerateDataError):
        fit_parametric_mle(zeros)
    full = TrialSeries("a", 50, (1.0, 2.0, 3.0), (50, 50, 50))
    with pytest.raises(DegenerateDataError):
        fit_parametric_mle(full, LOG_LOGISTIC)


def test_mle_needs_three_points():
    with pytest.raises(InsufficientDataError):
        fit_parametric_mle(TrialSeries("a", 50, (1.0, 2.0), (3, 5)))


@given(st.integers(0, 2**31 - 1), st.sampled_from([EXP_DECAY, LOG_LOGISTIC]))
def test_mle_dominates_truth(seed, kind):
    truth = TRUTH1 if kind == EXP_DECAY else LogLogisticParams(-2.0, 1.2)
    s = simulate_trial(truth, 60, TIMES16[1:], seed)
    if s.y.sum() == 0 or np.all(s.y == s.n):
        return
    fit = fit_parametric_mle(s, kind)
    assert fit.loglik >= loglik(s, truth) - 1e-9


def test_batch_matches_single_fits():
    rng = np.random.default_rng(3)
    Y = np.stack([rng.binomial(100, TRUTH1(TIMES16)) for _ in range(4)])
    fits, errors = fit_parametric_mle_batch(TIMES16, Y, 100, EXP_DECAY)
    assert not errors
    for row, f in zip(Y, fits):
        single = fit_parametric_mle(TrialSeries("a", 100, tuple(TIMES16), tuple(row)))
        assert f.loglik == pytest.approx(single.loglik, abs=1e-7)


def test_mle_deterministic():
    s = simulate_trial(TRUTH1, 100, TIMES16, 11)
    assert fit_parametric_mle(s) == fit_parametric_mle(s)


# --- Anscombe and weighted least squares --------------------------------------------------

def test_anscombe_examples():
    s = TrialSeries("a", 50, (1.0, 2.0, 3.0), (0, 25, 50))
    p = anscombe_proportions(s)
    assert p[0] == pytest.approx(0.375 / 50.75) and p[0] == pytest.approx(0.007389, abs=1e-6)
    assert p[1] == 0.5
    assert p[2] == pytest.approx(0.992611, abs=1e-6)


def exact_series(curve, times, n=10**12):
    """Counts whose proportions equal the curve to about 1/n."""
    y = np.round(n * np.asarray(curve(times))).astype(np.int64)
    return TrialSeries("exact", n, tuple(float(t) for t in times), tuple(int(v) for v in y))


@pytest.mark.parametrize("gamma", [(0.1, 0.2, 0.3), (0.05, 0.15, 0.1, 0.25, 0.2)])
def test_bernstein_exact_recovery(gamma):
    truth = BernsteinCurve(len(gamma), gamma, 0.0, 30.0)
    fit = fit_bernstein_wls(exact_series(truth, TIMES31[1:]), len(gamma), STRICT, 0.0, 30.0)
    assert np.max(np.abs(np.subtract(fit.curve.gamma, gamma))) <= 1e-6


@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.sampled_from([STRICT, RELAXED]))
def test_wls_feasible(seed, m, mode):
    s = simulate_trial(TRUTH1, 50, TIMES16, seed)
    fit = fit_bernstein_wls(s, m, mode)
    g = np.asarray(fit.curve.gamma)
    eta = np.cumsum(g)
    assert np.all(eta >= -1e-8) and np.all(eta <= 1 + 1e-8)
    if mode == STRICT:
        assert np.all(g >= -1e-8) and np.all(np.diff(eta) >= -1e-8)
    else:
        assert np.all(g[m // 3:] >= -1e-8)


def _wrss(series, m, gamma):
    p = anscombe_proportions(series)
    w = series.n / (p * (1 - p))
    X = bernstein_design(series.t / series.t[-1], m)
    return float(np.sum(w * (p - X @ gamma) ** 2))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("m", [2, 3, 4])
def test_wls_beats_feasible_grid(seed, m):
    s = simulate_trial(TRUTH1, 80, TIMES16, seed)
    fit = fit_bernstein_wls(s, m, STRICT)
    steps = 20
    grid = [np.array(c) / steps for c in itertools.product(range(steps + 1), repeat=m)
            if sum(c) <= steps]
    best = min(_wrss(s, m, g) for g in grid)
    assert fit.objective <= best + 1e-9
    assert fit.objective == pytest.approx(_wrss(s, m, np.asarray(fit.curve.gamma)), rel=1e-10)


def test_constant_proportions_fit_is_monotone():
    c = 0.4
    s = TrialSeries("flat", 100, tuple(range(1, 11)), (40,) * 10)
    fit = fit_bernstein_wls(s, 3, STRICT)
    grid = np.linspace(0, 15, 300)
    assert np.all(np.diff(fit.curve(grid)) >= -1e-12)
    assert fit.curve.eta[-1] >= c - 1e-6


def test_origin_augmentation():
    s = TrialSeries("a", 50, (2.0, 4.0, 6.0), (5, 10, 20))
    aug = augment_origin(s)
    assert aug.times[0] == 0.0 and aug.counts[0] == 0 and len(aug) == 4
    assert augment_origin(aug) is aug
    fit = fit_bernstein_wls(s, 2, ORIGIN_AUGMENTED)
    assert fit.curve.mode == ORIGIN_AUGMENTED


def test_wls_rejects_bad_inputs():
    s = simulate_trial(TRUTH1, 50, TIMES16, 1)
    with pytest.raises(ValueError):
        fit_bernstein_wls(s, 1)
    with pytest.raises(ValueError):
        fit_bernstein_wls(s, 3, "loose")
    with pytest.raises(ValueError):
        fit_bernstein_wls(s, 3, STRICT, 0.0, 10.0)  # window ends before the data


# --- KS selection ----------------------------------------------------------------------

def test_ks_examples():
    N = 20
    q = norm.ppf((np.arange(1, N + 1) - 0.5) / N)
    assert ks_statistic(q) == pytest.approx(0.5 / N)
    assert ks_pvalue(q) > 0.99
    zeros = np.zeros(N)
    assert ks_statistic(zeros) == pytest.approx(0.5)
    assert ks_pvalue(zeros) < 0.001
    z = np.random.default_rng(0).normal(size=N)
    assert ks_pvalue(z) == ks_pvalue(z.copy())


@given(st.lists(st.floats(-8, 8), min_size=3, max_size=60))
def test_ks_pvalue_in_unit_interval(z):
    p = ks_pvalue(z)
    assert 0.0 <= p <= 1.0


def test_ks_pvalue_close_to_exact():
    from scipy.stats import kstest

    rng = np.random.default_rng(1)
    for N in (16, 31, 60):
        z = rng.normal(0.3, 1.2, size=N)
        assert ks_pvalue(z) == pytest.approx(kstest(z, "norm").pvalue, abs=0.03)


def test_candidate_degrees():
    assert list(candidate_degrees(16)) == [2, 3, 4, 5, 6]
    assert list(candidate_degrees(31)) == list(range(2, 11))


def test_standardized_residuals_formula():
    s = simulate_trial(TRUTH1, 100, TIMES16, 4)
    fit = fit_bernstein_wls(s, 3)
    z = standardized_residuals(s, fit)
    th = np.clip(fit.curve(s.t), 1e-6, 1 - 1e-6)
    np.testing.assert_allclose(z, 10 * (anscombe_proportions(s) - th) / np.sqrt(th * (1 - th)))


def test_select_degree_structure():
    s = simulate_trial(TRUTH1, 100, TIMES16, 8)
    sel = select_degree_ks(s, 0.2)
    assert [m for m, _ in sel.candidates] == [2, 3, 4, 5, 6]
    if sel.chosen_m is not None:
        assert sel.chosen_m == min(m for m, p in sel.candidates if p >= 0.2)
    parallel = select_degree_ks(s, 0.2, max_workers=4)
    assert parallel.candidates == sel.candidates and parallel.chosen_m == sel.chosen_m


def test_select_degree_threshold_validation():
    s = simulate_trial(TRUTH1, 100, TIMES16, 8)
    with pytest.raises(ValueError):
        select_degree_ks(s, 1.5)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=9), st.floats(0.01, 0.99),
       st.floats(0.01, 0.99))
def test_choose_degree_monotone_in_threshold(pvals, t1, t2):
    cands = [(m + 2, p) for m, p in enumerate(pvals)]
    lo, hi = sorted((t1, t2))
    a, b = choose_degree(cands, lo), choose_degree(cands, hi)
    inf = math.inf
    assert (inf if a is None else a) <= (inf if b is None else b)
