"""scikit-learn style wrappers.

The tests are fit on a whole meta-analysis, so ``fit`` takes the dataset as
``X``: a :class:`~msset.model.MetaDataset`, or an ``(m, J)`` array of
effects together with ``stderr=`` of the same shape (``NaN`` = unreported).

>>> est = MSSET().fit(effects, stderr=stderrs)     # doctest: +SKIP
>>> est.statistic_, est.pvalue_                     # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .heterogeneity import dl_tau2, transform_snd_precision
from .model import MetaDataset, validate_dataset
from .score_test import fit_null, run_msset, within_variances
from .univariate import begg_test, bonferroni_combine, egger_test

__all__ = ["check_dataset", "MSSET", "EggerTest", "BeggTest", "SNDTransformer"]


def check_dataset(X, stderr=None, counts=None, min_studies: int = 3) -> MetaDataset:
    """Coerce ``X`` to a validated :class:`MetaDataset`.

    Raises ``ValueError`` listing every validation problem.
    """
    if isinstance(X, MetaDataset):
        if stderr is not None:
            raise ValueError("stderr given together with a MetaDataset")
        data = X
    else:
        if stderr is None:
            raise ValueError("array input needs stderr= of the same shape")
        effects = np.asarray(X, dtype=float)
        stderr = np.asarray(stderr, dtype=float)
        if effects.ndim == 1:
            effects, stderr = effects[:, None], stderr.reshape(-1, 1)
        if effects.ndim != 2:
            raise ValueError(f"expected 2-D effects, got shape {effects.shape}")
        data = MetaDataset(effects, stderr, counts=counts)
    problems = validate_dataset(data, min_studies)
    if problems:
        raise ValueError("invalid dataset: " + "; ".join(problems))
    return data


class MSSET(BaseEstimator):
    """Multivariate score test for small-study effects.

    Parameters
    ----------
    smooth_outcomes : tuple of int
        Binary outcomes analysed with smoothed log-OR variances.
    m_convention : {"per-outcome", "total"}
    sigma_aa : {"sandwich", "bootstrap"}
    bread : {"expected", "observed"}
    bootstrap_reps : int
    random_state : int
        Seed for the bootstrap estimate of the robust variance.
    alpha : float
        Level for :attr:`reject_`.

    Attributes
    ----------
    result_ : MssetResult
    statistic_, pvalue_ : float
    reject_ : bool
    """

    def __init__(self, smooth_outcomes=(), m_convention="per-outcome", sigma_aa="sandwich",
                 bread="expected", bootstrap_reps=1000, random_state=0, alpha=0.10):
        self.smooth_outcomes = smooth_outcomes
        self.m_convention = m_convention
        self.sigma_aa = sigma_aa
        self.bread = bread
        self.bootstrap_reps = bootstrap_reps
        self.random_state = random_state
        self.alpha = alpha

    def fit(self, X, y=None, stderr=None, counts=None):
        data = check_dataset(X, stderr, counts)
        self.result_ = run_msset(data, tuple(self.smooth_outcomes), self.m_convention, self.sigma_aa,
                                 bread=self.bread, bootstrap_reps=self.bootstrap_reps,
                                 seed=self.random_state, validate=False)
        self.statistic_ = self.result_.statistic
        self.pvalue_ = self.result_.p_value
        self.reject_ = bool(self.pvalue_ < self.alpha)
        self.n_studies_, self.n_outcomes_ = data.m, data.J
        return self


class _Univariate(BaseEstimator):
    def _combine(self, results):
        self.results_ = tuple(results)
        self.combined_ = bonferroni_combine(results)
        self.pvalues_ = np.array([r.p_value for r in results])
        self.statistic_ = self.combined_.statistic
        self.pvalue_ = self.combined_.p_value
        self.reject_ = bool(self.pvalue_ < self.alpha)
        return self


class EggerTest(_Univariate):
    """Egger's regression test per outcome, Bonferroni-combined in ``pvalue_``.

    ``reference`` is ``"t"`` or ``"normal"``.
    """

    def __init__(self, smooth_outcomes=(), reference="t", alpha=0.10):
        self.smooth_outcomes = smooth_outcomes
        self.reference = reference
        self.alpha = alpha

    def fit(self, X, y=None, stderr=None, counts=None):
        data = check_dataset(X, stderr, counts)
        fit = fit_null(data, variances=within_variances(data, tuple(self.smooth_outcomes)))
        return self._combine([egger_test(t, self.reference) for t in fit.transforms])


class BeggTest(_Univariate):
    """Begg's rank correlation test per outcome.

    ``random_effects=True`` adds the DL between-study variance to each
    study's variance; the default is the classic fixed-effect version.
    """

    def __init__(self, random_effects=False, alpha=0.10):
        self.random_effects = random_effects
        self.alpha = alpha

    def fit(self, X, y=None, stderr=None, counts=None):
        data = check_dataset(X, stderr, counts)
        res = []
        for j in range(data.J):
            rep = data.reported[:, j]
            yj, sj = data.effects[rep, j], data.stderrs[rep, j]
            res.append(begg_test(yj, sj, dl_tau2(yj, sj) if self.random_effects else 0.0))
        return self._combine(res)


class SNDTransformer(TransformerMixin, BaseEstimator):
    """Standard normal deviates and precisions on the random-effects scale.

    ``fit`` estimates the DL between-study variance of each outcome
    (``tau2_``); ``transform`` returns an ``(m, 2J)`` array with columns
    ``SND_1, P_1, SND_2, P_2, ...`` (``NaN`` where unreported).
    """

    def fit(self, X, y=None, stderr=None):
        data = check_dataset(X, stderr, min_studies=2)
        self.tau2_ = np.array([
            dl_tau2(data.effects[data.reported[:, j], j], data.stderrs[data.reported[:, j], j])
            for j in range(data.J)
        ])
        self.n_outcomes_ = data.J
        return self

    def transform(self, X, stderr=None):
        check_is_fitted(self, "tau2_")
        data = check_dataset(X, stderr, min_studies=1)
        if data.J != self.n_outcomes_:
            raise ValueError(f"fitted on {self.n_outcomes_} outcomes, got {data.J}")
        out = np.full((data.m, 2 * data.J), np.nan)
        for j in range(data.J):
            t = transform_snd_precision(data, j, self.tau2_[j])
            out[t.reporting_index, 2 * j] = t.snd
            out[t.reporting_index, 2 * j + 1] = t.precision
        return out

    def fit_transform(self, X, y=None, stderr=None):
        return self.fit(X, stderr=stderr).transform(X, stderr=stderr)
