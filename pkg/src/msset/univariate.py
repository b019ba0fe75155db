"""Univariate comparator tests: Egger's regression, Begg's rank correlation, Bonferroni."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .heterogeneity import OutcomeTransform

__all__ = ["TestResult", "egger_test", "begg_test", "kendall_s", "bonferroni_combine"]


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    statistic: float
    p_value: float
    n: int
    method: str
    per_outcome: Optional[tuple["TestResult", ...]] = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.statistic):
            raise ValueError(f"{self.method}: non-finite statistic")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"{self.method}: p-value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict:
        out = {"method": self.method, "statistic": self.statistic, "p_value": self.p_value, "n": self.n}
        out.update(self.extra)
        if self.per_outcome is not None:
            out["per_outcome"] = [r.to_dict() for r in self.per_outcome]
        return out


def egger_test(transform: OutcomeTransform, reference: str = "t") -> TestResult:
    """Egger's regression test: OLS of SND on precision, t-test of the intercept.

    ``reference`` is ``"t"`` (``m - 2`` degrees of freedom) or ``"normal"``.
    """
    x = transform.precision
    y = transform.snd
    m = x.size
    if m < 3:
        raise ValueError(f"Egger's test needs at least 3 studies, got {m}")
    xc = x - x.mean()
    sxx = (xc**2).sum()
    if sxx <= 1e-14 * (x**2).sum():
        raise ValueError("degenerate design (constant precision)")
    slope = (xc * (y - y.mean())).sum() / sxx
    intercept = y.mean() - slope * x.mean()
    resid = y - intercept - slope * x
    sigma2 = (resid**2).sum() / (m - 2)
    se = np.sqrt(sigma2 * (1.0 / m + x.mean() ** 2 / sxx))
    if se == 0.0:
        t = 0.0 if intercept == 0.0 else np.copysign(np.inf, intercept)
    else:
        t = intercept / se
    if reference == "t":
        p = 2 * stats.t.sf(abs(t), m - 2)
    elif reference == "normal":
        p = 2 * stats.norm.sf(abs(t))
    else:
        raise ValueError(f"unknown reference distribution {reference!r}")
    return TestResult(
        float(t), float(min(1.0, p)), m, "egger",
        extra={"intercept": float(intercept), "slope": float(slope), "se_intercept": float(se),
               "tau2": transform.tau2_hat},
    )


def kendall_s(x, y) -> tuple[int, float]:
    """Kendall's ``S = P - Q`` and its tie-corrected null variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    iu = np.triu_indices(n, 1)
    S = int((np.sign(x[:, None] - x[None, :])[iu] * np.sign(y[:, None] - y[None, :])[iu]).sum())

    def ties(v):
        _, t = np.unique(v, return_counts=True)
        return (t * (t - 1) * (2 * t + 5)).sum()

    var = (n * (n - 1) * (2 * n + 5) - ties(x) - ties(y)) / 18.0
    return S, float(var)


def begg_test(effects, stderrs, tau2: float = 0.0) -> TestResult:
    """Begg and Mazumdar's rank correlation test.

    Kendall correlation between the variance-stabilised deviates
    ``(y - ybar) / sqrt(v - var(ybar))`` and the variances ``v = s**2 + tau2``,
    referred to a normal distribution.
    """
    y = np.asarray(effects, dtype=float)
    v = np.asarray(stderrs, dtype=float) ** 2 + tau2
    m = y.size
    if m < 3:
        raise ValueError(f"Begg's test needs at least 3 studies, got {m}")
    if np.ptp(v) == 0:
        raise ValueError("rank test undefined: all variances equal")
    w = 1 / v
    ybar = (w * y).sum() / w.sum()
    dev = (y - ybar) / np.sqrt(v - 1 / w.sum())
    S, var = kendall_s(dev, v)
    z = S / np.sqrt(var) if var > 0 else 0.0
    n_pairs = m * (m - 1) / 2
    return TestResult(
        float(z), float(min(1.0, 2 * stats.norm.sf(abs(z)))), m, "begg",
        extra={"kendall_s": S, "kendall_tau": S / n_pairs, "tau2": float(tau2)},
    )


def bonferroni_combine(results: Sequence[TestResult]) -> TestResult:
    """Bonferroni-combined decision over outcomes: ``min(1, J * min p)``."""
    results = tuple(results)
    if not results:
        raise ValueError("nothing to combine")
    if len(results) == 1:
        return results[0]
    best = min(results, key=lambda r: r.p_value)
    p = min(1.0, len(results) * best.p_value)
    return TestResult(best.statistic, p, sum(r.n for r in results),
                      f"{best.method}-bonferroni", per_outcome=results)
