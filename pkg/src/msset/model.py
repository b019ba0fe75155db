"""Data containers and the multivariate random-effects generative model.

Datasets are stored as dense ``(m, J)`` arrays with ``NaN`` marking an
unreported outcome; :class:`StudyRecord` / :class:`OutcomeMeasurement` give a
per-study view for callers that prefer records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "OutcomeMeasurement",
    "StudyRecord",
    "MetaDataset",
    "ModelParams",
    "default_s_dist",
    "marginal_covariance",
    "generate_dataset",
    "draw_studies",
    "validate_dataset",
    "MIN_STUDIES_PER_OUTCOME",
]

MIN_STUDIES_PER_OUTCOME = 3


@dataclass(frozen=True)
class OutcomeMeasurement:
    effect: float
    stderr: float

    def __post_init__(self):
        if not np.isfinite(self.effect):
            raise ValueError(f"effect must be finite, got {self.effect}")
        if not (np.isfinite(self.stderr) and self.stderr > 0):
            raise ValueError(f"stderr must be positive and finite, got {self.stderr}")


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    measurements: tuple[Optional[OutcomeMeasurement], ...]
    # per outcome: None or (a, b, c, d)
    counts: Optional[tuple[Optional[tuple[float, float, float, float]], ...]] = None

    def __post_init__(self):
        if all(m is None for m in self.measurements):
            raise ValueError(f"study {self.study_id!r} reports no outcome")
        if self.counts is not None:
            if len(self.counts) != len(self.measurements):
                raise ValueError("counts must have one entry per outcome")
            for tab in self.counts:
                if tab is None:
                    continue
                a, b, c, d = tab
                if min(tab) < 0 or a + c <= 0 or b + d <= 0:
                    raise ValueError(f"invalid 2x2 table {tab} in study {self.study_id!r}")


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """``m`` studies by ``J`` outcomes of (effect, standard error).

    Parameters
    ----------
    effects, stderrs : ndarray of shape (m, J)
        ``NaN`` in both marks an outcome the study did not report.
    study_ids : sequence of str, optional
        Defaults to ``"s1" ... "sm"``.
    outcome_labels : sequence of str, optional
        Defaults to ``"y1" ... "yJ"``.
    counts : ndarray of shape (m, J, 4), optional
        2x2 tables ``(a, b, c, d)`` for binary outcomes, ``NaN`` elsewhere.
    """

    effects: np.ndarray
    stderrs: np.ndarray
    study_ids: tuple[str, ...] = None
    outcome_labels: tuple[str, ...] = None
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        effects = np.atleast_2d(np.asarray(self.effects, dtype=float))
        stderrs = np.atleast_2d(np.asarray(self.stderrs, dtype=float))
        if effects.shape != stderrs.shape:
            raise ValueError(f"effects {effects.shape} and stderrs {stderrs.shape} differ in shape")
        m, J = effects.shape
        if J < 1:
            raise ValueError("need at least one outcome")
        # missingness must agree between the two arrays
        miss = np.isnan(effects) | np.isnan(stderrs)
        effects = np.where(miss, np.nan, effects)
        stderrs = np.where(miss, np.nan, stderrs)
        effects.setflags(write=False)
        stderrs.setflags(write=False)
        object.__setattr__(self, "effects", effects)
        object.__setattr__(self, "stderrs", stderrs)

        ids = self.study_ids
        ids = tuple(f"s{i + 1}" for i in range(m)) if ids is None else tuple(str(s) for s in ids)
        if len(ids) != m:
            raise ValueError(f"{len(ids)} study ids for {m} studies")
        object.__setattr__(self, "study_ids", ids)

        labels = self.outcome_labels
        labels = tuple(f"y{j + 1}" for j in range(J)) if labels is None else tuple(labels)
        if len(labels) != J:
            raise ValueError(f"{len(labels)} outcome labels for {J} outcomes")
        object.__setattr__(self, "outcome_labels", labels)

        if self.counts is not None:
            counts = np.asarray(self.counts, dtype=float)
            if counts.shape != (m, J, 4):
                raise ValueError(f"counts must have shape {(m, J, 4)}, got {counts.shape}")
            counts.setflags(write=False)
            object.__setattr__(self, "counts", counts)

    # -- shape -----------------------------------------------------------
    @property
    def m(self) -> int:
        return self.effects.shape[0]

    @property
    def J(self) -> int:
        return self.effects.shape[1]

    @property
    def reported(self) -> np.ndarray:
        """Boolean ``(m, J)`` mask of reported outcomes."""
        return ~np.isnan(self.effects)

    @property
    def m_j(self) -> np.ndarray:
        return self.reported.sum(axis=0)

    # -- record views ----------------------------------------------------
    @property
    def studies(self) -> tuple[StudyRecord, ...]:
        out = []
        for i in range(self.m):
            meas = tuple(
                None if np.isnan(self.effects[i, j])
                else OutcomeMeasurement(float(self.effects[i, j]), float(self.stderrs[i, j]))
                for j in range(self.J)
            )
            counts = None
            if self.counts is not None:
                counts = tuple(
                    None if np.isnan(self.counts[i, j]).any() else tuple(float(v) for v in self.counts[i, j])
                    for j in range(self.J)
                )
            out.append(StudyRecord(self.study_ids[i], meas, counts))
        return tuple(out)

    @classmethod
    def from_studies(cls, studies: Sequence[StudyRecord], outcome_labels=None) -> "MetaDataset":
        if not studies:
            raise ValueError("no studies")
        J = len(studies[0].measurements)
        if any(len(s.measurements) != J for s in studies):
            raise ValueError("all studies must have the same number of outcomes")
        m = len(studies)
        effects = np.full((m, J), np.nan)
        stderrs = np.full((m, J), np.nan)
        counts = None
        if any(s.counts is not None for s in studies):
            counts = np.full((m, J, 4), np.nan)
        for i, s in enumerate(studies):
            for j, meas in enumerate(s.measurements):
                if meas is not None:
                    effects[i, j] = meas.effect
                    stderrs[i, j] = meas.stderr
            if s.counts is not None:
                for j, tab in enumerate(s.counts):
                    if tab is not None:
                        counts[i, j] = tab
        return cls(effects, stderrs, tuple(s.study_id for s in studies), outcome_labels, counts)

    # -- derived datasets ------------------------------------------------
    def subset(self, rows) -> "MetaDataset":
        """Dataset restricted to ``rows`` (index array or boolean mask), in that order."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return MetaDataset(
            self.effects[rows],
            self.stderrs[rows],
            tuple(self.study_ids[i] for i in rows),
            self.outcome_labels,
            None if self.counts is None else self.counts[rows],
        )

    def select_outcomes(self, cols) -> "MetaDataset":
        cols = list(cols)
        ds = MetaDataset(
            self.effects[:, cols],
            self.stderrs[:, cols],
            self.study_ids,
            tuple(self.outcome_labels[j] for j in cols),
            None if self.counts is None else self.counts[:, cols],
        )
        keep = ds.reported.any(axis=1)
        return ds if keep.all() else ds.subset(keep)

    def equals(self, other: "MetaDataset") -> bool:
        if self.effects.shape != other.effects.shape:
            return False
        same = (
            np.array_equal(self.effects, other.effects, equal_nan=True)
            and np.array_equal(self.stderrs, other.stderrs, equal_nan=True)
            and self.study_ids == other.study_ids
            and self.outcome_labels == other.outcome_labels
        )
        if not same:
            return False
        if (self.counts is None) != (other.counts is None):
            return False
        return self.counts is None or np.array_equal(self.counts, other.counts, equal_nan=True)

    def __repr__(self):
        return f"MetaDataset(m={self.m}, J={self.J}, m_j={self.m_j.tolist()})"


def default_s_dist(rng: np.random.Generator, size) -> np.ndarray:
    """Within-study standard errors ``|N(0.3, 0.5)|``, so ``s**2`` is the square of a N(0.3, 0.5) draw."""
    return np.abs(rng.normal(0.3, 0.5, size=size))


def _check_corr(R: np.ndarray, name: str) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(R, R.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if not np.allclose(np.diag(R), 1.0):
        raise ValueError(f"{name} must have unit diagonal")
    if np.linalg.eigvalsh(R).min() < -1e-10:
        raise ValueError(f"{name} is not positive semidefinite")
    return R


def _corr(value, J: int) -> np.ndarray:
    if np.ndim(value) == 0:
        R = np.full((J, J), float(value))
        np.fill_diagonal(R, 1.0)
        return R
    return np.asarray(value, dtype=float)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Generative truth for the multivariate random-effects model.

    ``rho_B`` and ``rho_W`` accept either a full correlation matrix or a
    scalar, which is expanded to a constant off-diagonal. ``s_dist`` maps
    ``(rng, size)`` to within-study standard errors.
    """

    beta: np.ndarray
    tau2: np.ndarray
    rho_B: np.ndarray = 0.0
    rho_W: np.ndarray = 0.0
    s_dist: Callable[[np.random.Generator, tuple], np.ndarray] = field(default=default_s_dist)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        J = beta.size
        tau2 = np.broadcast_to(np.asarray(self.tau2, dtype=float), (J,)).copy()
        if np.any(tau2 < 0) or not np.all(np.isfinite(tau2)):
            raise ValueError("tau2 must be nonnegative and finite")
        rho_B = _check_corr(_corr(self.rho_B, J), "rho_B")
        rho_W = _check_corr(_corr(self.rho_W, J), "rho_W")
        if rho_B.shape != (J, J) or rho_W.shape != (J, J):
            raise ValueError("correlation matrices must be J x J")
        for name, val in (("beta", beta), ("tau2", tau2), ("rho_B", rho_B), ("rho_W", rho_W)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def J(self) -> int:
        return self.beta.size

    @property
    def between_cov(self) -> np.ndarray:
        tau = np.sqrt(self.tau2)
        return np.outer(tau, tau) * self.rho_B


def marginal_covariance(params: ModelParams, s_row) -> np.ndarray:
    """Marginal covariance ``V_i = Delta_i + Omega`` of one study's effects.

    Raises
    ------
    ValueError
        If ``s_row`` has a non-positive entry or ``V_i`` is not PSD.
    """
    s = np.asarray(s_row, dtype=float)
    if s.shape != (params.J,):
        raise ValueError(f"s_row must have length {params.J}")
    if np.any(~(s > 0)):
        raise ValueError("within-study standard errors must be positive")
    V = np.outer(s, s) * params.rho_W + params.between_cov
    # exact diagonal, regardless of rounding in the products above
    V[np.diag_indices_from(V)] = s**2 + params.tau2
    if np.linalg.eigvalsh(V).min() < -1e-10 * max(1.0, np.abs(V).max()):
        raise ValueError("marginal covariance is not positive semidefinite")
    return V


def _psd_sqrt(R: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(R)
    return U * np.sqrt(np.clip(w, 0.0, None))


def draw_studies(params: ModelParams, m: int, rng: np.random.Generator):
    """Draw ``(theta, s, y)``: true effects, standard errors and observed effects, each ``(m, J)``."""
    J = params.J
    s = params.s_dist(rng, (m, J))
    # Y_i = beta + Omega^{1/2} z1 + diag(s_i) R_W^{1/2} z2, which has covariance V_i
    z_between = rng.standard_normal((m, J))
    z_within = rng.standard_normal((m, J))
    theta = params.beta + z_between @ _psd_sqrt(params.between_cov).T
    y = theta + s * (z_within @ _psd_sqrt(params.rho_W).T)
    return theta, s, y


def generate_dataset(params: ModelParams, m: int, seed) -> MetaDataset:
    """Draw ``m`` complete studies from the random-effects model.

    ``seed`` may be an int, a :class:`numpy.random.SeedSequence` or a
    :class:`numpy.random.Generator`; the same int or SeedSequence always
    reproduces the same dataset.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    _, s, y = draw_studies(params, m, rng)
    return MetaDataset(y, s)


def validate_dataset(data: MetaDataset, min_studies: int = MIN_STUDIES_PER_OUTCOME) -> list[str]:
    """Return a list of human-readable problems; empty when the dataset is usable."""
    problems = []
    seen = {}
    for i, sid in enumerate(data.study_ids):
        if sid in seen:
            problems.append(f"duplicate study id {sid!r} (rows {seen[sid] + 1} and {i + 1})")
        seen.setdefault(sid, i)
    rep = data.reported
    for i, sid in enumerate(data.study_ids):
        if not rep[i].any():
            problems.append(f"study {sid!r} reports no outcome")
        for j, label in enumerate(data.outcome_labels):
            if not rep[i, j]:
                continue
            y, s = data.effects[i, j], data.stderrs[i, j]
            if not np.isfinite(y):
                problems.append(f"study {sid!r}, outcome {label!r}: non-finite effect")
            if not np.isfinite(s):
                problems.append(f"study {sid!r}, outcome {label!r}: non-finite stderr")
            elif s <= 0:
                problems.append(f"study {sid!r}, outcome {label!r}: stderr {s} <= 0")
    for j, label in enumerate(data.outcome_labels):
        if data.m_j[j] < min_studies:
            problems.append(
                f"outcome {label!r}: m_j below minimum ({data.m_j[j]} < {min_studies} studies)"
            )
    return problems
