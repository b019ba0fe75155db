import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msset.heterogeneity import OutcomeTransform, dl_tau2, transform_snd_precision
from msset.model import MetaDataset
from msset.univariate import TestResult, begg_test, bonferroni_combine, egger_test, kendall_s


def _transform(P, snd):
    P, snd = np.asarray(P, float), np.asarray(snd, float)
    return OutcomeTransform(snd, P, 0.0, np.arange(P.size), snd / P, 1 / P)


def test_egger_symmetric_construction():
    d = 0.7
    r = egger_test(_transform([1, 1, 2, 2], [2 + d, 2 - d, 4 + d, 4 - d]))
    assert r.extra["intercept"] == pytest.approx(0.0, abs=1e-12)
    assert r.p_value == pytest.approx(1.0)


def test_egger_matches_normal_equations():
    rng = np.random.default_rng(4)
    P = rng.uniform(0.5, 3, 25)
    snd = 0.4 + 0.8 * P + rng.normal(size=25)
    r = egger_test(_transform(P, snd))
    X = np.column_stack([np.ones_like(P), P])
    beta = np.linalg.solve(X.T @ X, X.T @ snd)
    assert r.extra["intercept"] == pytest.approx(beta[0], rel=1e-12)
    assert r.extra["slope"] == pytest.approx(beta[1], rel=1e-12)
    resid = snd - X @ beta
    cov = resid @ resid / 23 * np.linalg.inv(X.T @ X)
    assert r.extra["se_intercept"] == pytest.approx(np.sqrt(cov[0, 0]), rel=1e-10)


def test_egger_sign_flip():
    rng = np.random.default_rng(5)
    P = rng.uniform(0.5, 3, 15)
    snd = 1 + rng.normal(size=15)
    a = egger_test(_transform(P, snd))
    b = egger_test(_transform(P, -snd))
    assert b.extra["intercept"] == pytest.approx(-a.extra["intercept"])
    assert b.p_value == pytest.approx(a.p_value)


def test_egger_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        egger_test(_transform([1, 1, 1], [1, 2, 3]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20))
def test_egger_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=12)
    s = rng.uniform(0.2, 1.5, 12)

    def stat(y, s):
        d = MetaDataset(y[:, None], s[:, None])
        return egger_test(transform_snd_precision(d, 0, dl_tau2(y, s))).statistic

    assert stat(c * y, c * s) == pytest.approx(stat(y, s), rel=1e-10, abs=1e-12)


def test_egger_permutation_invariance():
    rng = np.random.default_rng(6)
    P = rng.uniform(0.5, 3, 20)
    snd = rng.normal(size=20)
    perm = rng.permutation(20)
    a, b = egger_test(_transform(P, snd)), egger_test(_transform(P[perm], snd[perm]))
    assert b.statistic == pytest.approx(a.statistic, rel=1e-10)


def _brute_s(x, y):
    S = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        S += np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
    return int(S)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=2, max_size=25))
def test_kendall_brute_force(pairs):
    x, y = map(np.array, zip(*pairs))
    assert kendall_s(x, y)[0] == _brute_s(x, y)


def test_kendall_variance_no_ties():
    n = 7
    assert kendall_s(np.arange(n), np.arange(n))[1] == pytest.approx(n * (n - 1) * (2 * n + 5) / 18)


def test_begg_concordant_three():
    # with equal stderrs scaled so the deviates rise with the variances
    y = np.array([0.0, 1.0, 3.0])
    s = np.array([0.5, 1.0, 1.5])
    r = begg_test(y, s)
    assert r.extra["kendall_tau"] == pytest.approx(1.0)
    assert r.statistic == pytest.approx(3 / np.sqrt(3 * 2 * 11 / 18), rel=1e-12)
    assert r.statistic == pytest.approx(1.5667, abs=1e-4)


def test_begg_reverse_variance_negates():
    rng = np.random.default_rng(8)
    y = rng.normal(size=15)
    s = rng.uniform(0.2, 2, 15)
    dev = begg_test(y, s)
    # reversing the variance order with the deviates held fixed
    S, var = kendall_s(np.arange(15), s**2)
    S2, _ = kendall_s(np.arange(15), -(s**2))
    assert S2 == -S
    assert dev.extra["kendall_tau"] == pytest.approx(dev.extra["kendall_s"] / 105)


def test_begg_monotone_variance_transform():
    rng = np.random.default_rng(9)
    x = rng.normal(size=20)
    v = rng.uniform(0.1, 2, 20)
    assert kendall_s(x, v)[0] == kendall_s(x, np.log(v) ** 3 + v)[0]


def test_begg_permutation_invariance():
    rng = np.random.default_rng(10)
    y = rng.normal(size=18)
    s = rng.uniform(0.2, 2, 18)
    perm = rng.permutation(18)
    assert begg_test(y[perm], s[perm]).statistic == pytest.approx(begg_test(y, s).statistic)


def test_begg_undefined():
    with pytest.raises(ValueError, match="undefined"):
        begg_test([1, 2, 3], [1, 1, 1])


def _res(p):
    return TestResult(0.0, p, 10, "egger")


def test_bonferroni():
    assert bonferroni_combine([_res(0.04), _res(0.5)]).p_value == pytest.approx(0.08)
    assert bonferroni_combine([_res(0.9), _res(0.9)]).p_value == 1.0
    r = _res(0.3)
    assert bonferroni_combine([r]) is r
    with pytest.raises(ValueError):
        bonferroni_combine([])


def test_result_validation():
    with pytest.raises(ValueError):
        TestResult(np.nan, 0.5, 3, "x")
    with pytest.raises(ValueError):
        TestResult(1.0, 1.5, 3, "x")
