import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp, gammainc
from numpy.testing import assert_allclose

from msset.heterogeneity import OutcomeTransform
from msset.model import MetaDataset, ModelParams, generate_dataset
from msset.score_test import (
    MssetError,
    NullFit,
    _intercepts,
    chi_square_tail,
    fit_null,
    information_aa_block,
    msset_statistic,
    null_slope,
    pseudo_score,
    run_msset,
    sigma_aa_bootstrap_oracle,
    sigma_aa_sandwich,
)

# worked-example inputs
U_EX = np.array([-4.84, 1.32])
IAA_EX = np.diag([6.57e-2, 3.37e-2])
SIGMA_EX = np.array([[7.10e-4, -2.79e-7], [-2.79e-7, 1.10e-5]])


def _tr(P, snd):
    P, snd = np.asarray(P, float), np.asarray(snd, float)
    return OutcomeTransform(snd, P, 0.0, np.arange(P.size), snd / P, 1 / P)


def _fit(*pairs):
    trs = tuple(_tr(P, s) for P, s in pairs)
    b0 = np.array([null_slope(t) for t in trs])
    J = len(trs)
    return NullFit(b0, np.zeros(J), np.zeros(J), trs, np.ones((trs[0].m, J)), trs[0].m)


# -- null slope and score ----------------------------------------------------

def test_null_slope_proportional():
    assert null_slope(_tr([1, 2, 3], [2.5, 5, 7.5])) == pytest.approx(2.5)


def test_null_slope_hand():
    assert null_slope(_tr([1, 2], [1, 1])) == pytest.approx(0.6)


def test_null_slope_oracle():
    rng = np.random.default_rng(0)
    P, snd = rng.uniform(0.3, 3, 30), rng.normal(size=30)
    coef, *_ = np.linalg.lstsq(P[:, None], snd, rcond=None)
    assert null_slope(_tr(P, snd)) == pytest.approx(coef[0], rel=1e-12)


def test_score_hand():
    assert_allclose(pseudo_score(_fit(([1, 2], [1, 1]))), [0.2])


def test_score_zero_when_proportional():
    assert_allclose(pseudo_score(_fit(([1, 2, 4], [3, 6, 12]), ([1, 3, 2], [-1, -3, -2]))), [0, 0], atol=1e-12)


def test_score_is_gradient_of_pseudolikelihood():
    rng = np.random.default_rng(1)
    P, snd = rng.uniform(0.3, 3, 25), rng.normal(size=25) + 0.5

    def loglik(a, b):
        return -0.5 * ((snd - a - b * P) ** 2).sum()

    fit = _fit((P, snd))
    b0, h = fit.b0[0], 1e-5
    fd = (loglik(h, b0) - loglik(-h, b0)) / (2 * h)
    assert abs(fd - pseudo_score(fit)[0]) <= 1e-6
    # and the slope is already at its optimum
    assert abs((loglik(0, b0 + h) - loglik(0, b0 - h)) / (2 * h)) <= 1e-6


# -- information -------------------------------------------------------------

def test_information_worked_example():
    info = information_aa_block([(41, 91.46, 324.40), (41, 57.54, 292.79)])
    d = np.diag(info.I_aa_inv_block)
    assert float(f"{d[0]:.3g}") == 6.57e-2
    assert float(f"{d[1]:.3g}") == 3.37e-2


def test_information_dense_inverse(with_missing):
    fit = fit_null(with_missing)
    info = information_aa_block(fit)
    full = np.linalg.inv(info.full())
    J = fit.J
    assert_allclose(info.I_aa_inv_block, full[:J, :J], rtol=1e-10, atol=1e-14)


def test_information_total_convention(with_missing):
    fit = fit_null(with_missing)
    assert_allclose(np.diag(information_aa_block(fit, "total").I_aa), [with_missing.m] * 2)
    assert_allclose(np.diag(information_aa_block(fit).I_aa), with_missing.m_j)


def test_information_singular():
    with pytest.raises(MssetError, match="singular"):
        information_aa_block([(3, 3.0, 3.0)])


# -- statistic and chi-square ------------------------------------------------

def test_statistic_worked_example():
    stat, lam = msset_statistic(U_EX, IAA_EX, SIGMA_EX, 41)
    assert lam == pytest.approx(5.56e-3, rel=2e-3)
    assert stat == pytest.approx(7.02, abs=0.02)
    assert chi_square_tail(stat, 2) == pytest.approx(0.030, abs=1e-3)


def test_statistic_zero_score():
    assert msset_statistic([0, 0], IAA_EX, SIGMA_EX, 41)[0] == 0.0


def test_statistic_scalar_path():
    U, iaa, sig, m = 1.7, 0.08, 0.002, 30
    stat, lam = msset_statistic([U], [[iaa]], [[sig]], m)
    assert lam == pytest.approx(sig / iaa)
    assert stat == pytest.approx(U**2 * iaa / (m * sig / iaa))


def test_statistic_accepts_blocks():
    info = information_aa_block([(41, 91.46, 324.40), (41, 57.54, 292.79)])
    a = msset_statistic(U_EX, info, SIGMA_EX, 41)
    b = msset_statistic(U_EX, info.I_aa_inv_block, SIGMA_EX, 41)
    assert a == b


def test_chi_square_values():
    assert chi_square_tail(7.02, 2) == pytest.approx(np.exp(-3.51), rel=1e-12)
    assert chi_square_tail(7.02, 2) == pytest.approx(0.02990, abs=1e-5)
    assert chi_square_tail(0.0, 3) == 1.0
    assert chi_square_tail(3.841459, 1) == pytest.approx(0.05, abs=1e-5)


@pytest.mark.parametrize("df", range(1, 7))
def test_chi_square_high_precision(df):
    mp.dps = 40
    for x in np.linspace(0, 50, 101):
        ref = float(gammainc(mp.mpf(df) / 2, mp.mpf(x) / 2, regularized=True, b=mp.inf))
        got = chi_square_tail(x, df)
        assert abs(got - ref) <= 1e-10 * ref


# -- sandwich and bootstrap --------------------------------------------------

def test_sandwich_symmetric_psd(with_missing, bivariate):
    for d in (with_missing, bivariate):
        S = sigma_aa_sandwich(d, fit_null(d))
        assert_allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= -1e-12


def test_sandwich_matches_bootstrap():
    d = generate_dataset(ModelParams((0, 0), (0.6, 0.6), 0.5, 0.3), 200, 2024)
    S = sigma_aa_sandwich(d, fit_null(d))
    B = sigma_aa_bootstrap_oracle(d, reps=2000, seed=1)
    assert np.linalg.norm(S - B) / np.linalg.norm(B) < 0.15


def test_sandwich_monte_carlo_variance():
    p = ModelParams((0.0,), (0.5,))
    m, reps = 500, 2000
    a_hat, sig = np.empty(reps), np.empty(reps)
    for r in range(reps):
        d = generate_dataset(p, m, np.random.SeedSequence(99, spawn_key=(r,)))
        a_hat[r] = _intercepts(d, d.stderrs**2, np.arange(m))[0]
        sig[r] = sigma_aa_sandwich(d, fit_null(d))[0, 0] / m
    assert abs(sig.mean() / a_hat.var(ddof=1) - 1) < 0.10


def test_bootstrap_degenerate():
    P = np.linspace(0.5, 3, 20)
    d = MetaDataset((np.full(20, 0.4))[:, None], (1 / P)[:, None])
    B = sigma_aa_bootstrap_oracle(d, reps=200, seed=0)
    assert np.abs(B).max() < 1e-20


def _cov_se(draws, m):
    # standard error of each covariance entry from the replicate products
    c = draws - draws.mean(axis=0)
    prod = c[:, :, None] * c[:, None, :]
    return m * prod.std(axis=0, ddof=1) / np.sqrt(len(draws))


def test_bootstrap_stability():
    d = generate_dataset(ModelParams((0, 0), (0.6, 0.6), 0.3, 0.3), 80, 3)
    a, da = sigma_aa_bootstrap_oracle(d, reps=400, seed=5, return_draws=True)
    b, db = sigma_aa_bootstrap_oracle(d, reps=800, seed=6, return_draws=True)
    se = np.sqrt(_cov_se(da, d.m) ** 2 + _cov_se(db, d.m) ** 2)
    assert np.all(np.abs(a - b) < 2 * se)


def test_bootstrap_permutation_at_fixed_index_sets():
    d = generate_dataset(ModelParams((0, 0), (0.6, 0.6), 0.3, 0.3), 40, 4)
    perm = np.random.default_rng(0).permutation(d.m)
    inv = np.argsort(perm)
    dp = d.subset(perm)
    rng = np.random.default_rng(1)
    for _ in range(50):
        rows = rng.integers(0, d.m, size=d.m)
        a = _intercepts(d, d.stderrs**2, rows)
        b = _intercepts(dp, dp.stderrs**2, inv[rows])
        if a is None:
            assert b is None
        else:
            assert_allclose(np.sort(b), np.sort(a), rtol=1e-10)


def test_bootstrap_needs_reps(bivariate):
    with pytest.raises(ValueError):
        sigma_aa_bootstrap_oracle(bivariate, reps=50)


# -- full pipeline -----------------------------------------------------------

def test_run_univariate():
    d = generate_dataset(ModelParams((0.0,), (0.4,)), 30, 8)
    r = run_msset(d)
    assert r.df == 1 and 0 < r.p_value <= 1
    U, iaa = r.score[0], d.m * r.info.I_aa_inv_block[0, 0]
    assert r.statistic == pytest.approx(U**2 * iaa / (d.m * r.sigma_aa[0, 0] / iaa))


def test_run_proportional_data():
    P = np.linspace(0.5, 3, 12)
    eff = np.column_stack([np.full(12, 0.4), np.full(12, -0.2)])
    se = np.column_stack([1 / P, 1 / P[::-1]])
    r = run_msset(MetaDataset(eff, se))
    assert r.statistic == pytest.approx(0.0, abs=1e-20)
    assert r.p_value == pytest.approx(1.0)


def test_run_validates():
    d = MetaDataset([[0.1], [0.2]], [[0.1], [0.2]])
    with pytest.raises(MssetError, match="m_j below minimum"):
        run_msset(d)


def _scaled(d, j, c):
    eff, se = np.array(d.effects), np.array(d.stderrs)
    eff[:, j] *= c
    se[:, j] *= c
    return MetaDataset(eff, se, d.study_ids, d.outcome_labels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5000), st.sampled_from([0, 1]), st.floats(0.01, 100))
def test_scale_invariance(seed, j, c):
    d = generate_dataset(ModelParams((0.2, 0), (0.3, 0.0), 0.4, 0.2), 25, seed)
    a, b = run_msset(d), run_msset(_scaled(d, j, c))
    assert b.statistic == pytest.approx(a.statistic, rel=1e-8, abs=1e-12)
    assert b.p_value == pytest.approx(a.p_value, rel=1e-8)


def test_permutation_invariance(with_missing):
    perm = np.random.default_rng(3).permutation(with_missing.m)
    a, b = run_msset(with_missing), run_msset(with_missing.subset(perm))
    assert b.statistic == pytest.approx(a.statistic, rel=1e-10)
    assert_allclose(b.sigma_aa, a.sigma_aa, rtol=1e-10)


def test_outcome_relabelling(with_missing):
    a, b = run_msset(with_missing), run_msset(with_missing.select_outcomes([1, 0]))
    assert b.statistic == pytest.approx(a.statistic, rel=1e-10)
    assert_allclose(b.score, a.score[::-1], rtol=1e-12)
    assert_allclose(b.sigma_aa, a.sigma_aa[::-1, ::-1], rtol=1e-10)


def test_bootstrap_option(bivariate):
    r = run_msset(bivariate, sigma_method="bootstrap", bootstrap_reps=300, seed=2)
    assert r.options["sigma_method"] == "bootstrap" and 0 < r.p_value <= 1


def test_result_dict_keys(bivariate):
    keys = run_msset(bivariate).to_dict().keys()
    for k in ("score", "I0_aa_inv", "sigma_aa", "lambda_bar", "statistic", "p_value", "b0", "tau2_hat"):
        assert k in keys


def test_smoothed_variant():
    from msset.selection import BinaryDesign, simulate_binary_dataset
    d = simulate_binary_dataset(ModelParams((0, 0), (0.5, 0.5)), 40, 1, BinaryDesign())
    r = run_msset(d, smooth_outcomes=(0,))
    assert 0 < r.p_value <= 1
    plain = generate_dataset(ModelParams((0, 0), (0.5, 0.5)), 20, 1)
    with pytest.raises(MssetError, match="no 2x2 counts"):
        run_msset(plain, smooth_outcomes=(0,))
