"""Between-study variance, the SND/precision transform and smoothed log-OR variances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MetaDataset

__all__ = [
    "OutcomeTransform",
    "dl_tau2",
    "transform_snd_precision",
    "smoothed_logor_variance",
    "logor_naive",
]


@dataclass(frozen=True, eq=False)
class OutcomeTransform:
    """Standardised deviates and precisions of one outcome over its reporting studies.

    ``precision = (s**2 + tau2_hat) ** -0.5`` and ``snd = effect * precision``.
    """

    snd: np.ndarray
    precision: np.ndarray
    tau2_hat: float
    reporting_index: np.ndarray
    effects: np.ndarray
    stderrs: np.ndarray

    @property
    def m(self) -> int:
        return self.snd.size


def dl_tau2(effects, stderrs) -> float:
    """DerSimonian-Laird moment estimate of the between-study variance.

    ``max(0, (Q - (k - 1)) / c)`` with inverse-variance weights
    ``w = s**-2``, ``Q = sum w (y - ybar_w)**2`` and
    ``c = sum w - sum w**2 / sum w``.
    """
    y = np.asarray(effects, dtype=float)
    s = np.asarray(stderrs, dtype=float)
    if y.size < 2:
        raise ValueError("insufficient studies for heterogeneity (need at least 2)")
    if np.any(~(s > 0)):
        raise ValueError("standard errors must be positive")
    w = s**-2.0
    sw = w.sum()
    ybar = (w * y).sum() / sw
    Q = (w * (y - ybar) ** 2).sum()
    c = sw - (w**2).sum() / sw
    return max(0.0, (Q - (y.size - 1)) / c)


def transform_snd_precision(data: MetaDataset, outcome: int, tau2: float, variances=None) -> OutcomeTransform:
    """Standardise one outcome at between-study variance ``tau2``.

    ``variances`` optionally replaces the within-study variances ``s**2``
    (length ``m``, entries ignored where the outcome is not reported); this is
    how smoothed binary-outcome variances enter.
    """
    if tau2 < 0:
        raise ValueError("tau2 must be nonnegative")
    idx = np.flatnonzero(data.reported[:, outcome])
    if idx.size == 0:
        raise ValueError(f"outcome {data.outcome_labels[outcome]!r} never reported")
    y = data.effects[idx, outcome]
    if variances is None:
        v = data.stderrs[idx, outcome] ** 2
    else:
        v = np.asarray(variances, dtype=float)[idx]
    precision = (v + tau2) ** -0.5
    return OutcomeTransform(y * precision, precision, float(tau2), idx, y, np.sqrt(v))


def logor_naive(tables):
    """Log odds ratios and their usual ``1/a + 1/b + 1/c + 1/d`` variances."""
    t = np.atleast_2d(np.asarray(tables, dtype=float))
    a, b, c, d = t.T
    return np.log(a * d / (b * c)), 1 / a + 1 / b + 1 / c + 1 / d


def _haldane(tables, correction):
    t = np.atleast_2d(np.asarray(tables, dtype=float)).copy()
    if np.any(t < 0):
        raise ValueError("2x2 cell counts must be nonnegative")
    zero = (t == 0).any(axis=1)
    if zero.any():
        if not correction:
            raise ValueError("zero cell in 2x2 table and continuity correction disabled")
        t[zero] += 0.5
    return t


def smoothed_logor_variance(tables, correction: bool = True):
    """Log odds ratios with variances smoothed over the pooled exposure proportions.

    Each table is ``(a, b, c, d)`` with ``a + c`` and ``b + d`` the two group
    totals. With ``p1`` the mean of ``a / (a + c)`` and ``p0`` the mean of
    ``b / (b + d)`` across tables, the smoothed variance is::

        1/((a+c) p1) + 1/((a+c)(1-p1)) + 1/((b+d) p0) + 1/((b+d)(1-p0))

    Tables with a zero cell get 0.5 added to every cell when ``correction``
    is true; otherwise a zero cell raises.

    Returns
    -------
    logor, var_smooth : ndarray
    """
    t = np.atleast_2d(np.asarray(tables, dtype=float))
    if t.size == 0:
        raise ValueError("need at least one 2x2 table")
    a, b, c, d = t.T
    if np.any(a + c <= 0) or np.any(b + d <= 0):
        raise ValueError("each 2x2 table needs positive group totals a+c and b+d")
    t = _haldane(t, correction)
    a, b, c, d = t.T
    n1, n0 = a + c, b + d
    p1 = np.mean(a / n1)
    p0 = np.mean(b / n0)
    if p1 <= 0 or p1 >= 1 or p0 <= 0 or p0 >= 1:
        raise ValueError("degenerate pooled proportion")
    var = 1 / (n1 * p1) + 1 / (n1 * (1 - p1)) + 1 / (n0 * p0) + 1 / (n0 * (1 - p0))
    return np.log(a * d / (b * c)), var
