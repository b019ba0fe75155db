"""Selection-model scenarios and the Type I error / power simulation harness.

Scenarios ``C1``-``C3`` publish or suppress whole studies according to the
two-sided Wald p-values of both outcomes; scenario ``P`` reports each outcome
independently with a logistic probability in its standardised deviate.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .heterogeneity import _haldane, logor_naive
from .model import MetaDataset, ModelParams, default_s_dist, draw_studies, generate_dataset
from .score_test import fit_null, run_msset, within_variances
from .univariate import begg_test, bonferroni_combine, egger_test

log = logging.getLogger(__name__)

__all__ = [
    "P_BIN_EDGES",
    "ScenarioSpec",
    "BinaryDesign",
    "ExperimentConfig",
    "ExperimentResult",
    "CellResult",
    "selection_probability",
    "apply_selection",
    "simulate_selected_dataset",
    "simulate_binary_dataset",
    "simulate_replicate",
    "replicate_decisions",
    "run_experiment",
    "TESTS",
]

# p-value bins for the C grids: <0.01, <0.05, <0.10, >=0.10
P_BIN_EDGES = (0.01, 0.05, 0.10)

C2_DEFAULT = (0.9, 0.7, 0.5, 0.2)
C3_DEFAULT = (0.8, 0.6, 0.4, 0.3)
P_LOGIT_DEFAULT = (-2.5, 0.1, 1.5, 2.0, 4.0)


def _grid_from_levels(levels) -> np.ndarray:
    # probability set by the least significant of the two outcomes
    levels = np.asarray(levels, dtype=float)
    k = levels.size
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    return levels[np.maximum(i, j)]


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """Selection mechanism.

    ``kind`` is one of ``none``, ``C1``, ``C2``, ``C3``, ``P`` or ``custom``.
    C-type scenarios (including ``custom``) use ``grid[bin(p1), bin(p2)]``
    over :data:`P_BIN_EDGES`; ``P`` uses ``logit_coeffs`` =
    ``(intercept, linear, quadratic, threshold, plateau)``.
    """

    kind: str = "none"
    grid: Optional[np.ndarray] = None
    logit_coeffs: tuple = P_LOGIT_DEFAULT

    def __post_init__(self):
        kind = self.kind
        if kind not in ("none", "C1", "C2", "C3", "P", "custom"):
            raise ValueError(f"unknown scenario {kind!r}")
        grid = self.grid
        if grid is None:
            if kind == "C1":
                grid = _grid_from_levels((1.0, 1.0, 0.0, 0.0))
            elif kind == "C2":
                grid = _grid_from_levels(C2_DEFAULT)
            elif kind == "C3":
                grid = _grid_from_levels(C3_DEFAULT)
            elif kind == "custom":
                raise ValueError("custom scenario needs a grid")
        if grid is not None:
            grid = np.asarray(grid, dtype=float)
            if grid.shape != (4, 4):
                raise ValueError("selection grid must be 4 x 4")
            if np.any((grid < 0) | (grid > 1)):
                raise ValueError("selection probabilities must lie in [0, 1]")
            grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def whole_study(self) -> bool:
        return self.grid is not None

    @classmethod
    def C(cls, levels, kind="custom") -> "ScenarioSpec":
        """C-type scenario from four diagonal levels (monotone grid)."""
        return cls(kind, _grid_from_levels(levels))


def _p_bin(p):
    return np.searchsorted(P_BIN_EDGES, p, side="right")


def selection_probability(spec: ScenarioSpec, snd, pvalues) -> np.ndarray:
    """Publication probabilities.

    ``snd`` and ``pvalues`` have shape ``(J,)`` for one study or ``(m, J)``.
    C-type scenarios return one probability per study; ``P`` returns one per
    outcome; ``none`` returns ones per study.
    """
    snd = np.asarray(snd, dtype=float)
    pvalues = np.asarray(pvalues, dtype=float)
    if spec.kind == "none":
        return np.ones(pvalues.shape[:-1])
    if spec.kind == "P":
        c0, c1, c2, thr, plateau = spec.logit_coeffs
        logit = np.where(snd < thr, c0 + c1 * snd + c2 * snd**2, plateau)
        return expit(logit)
    if pvalues.shape[-1] != 2:
        raise ValueError("C-type scenarios are defined for two outcomes")
    b = _p_bin(pvalues)
    return spec.grid[b[..., 0], b[..., 1]]


def _selection_inputs(data: MetaDataset, tau2):
    z = data.effects / data.stderrs
    p = 2 * stats.norm.sf(np.abs(z))
    snd = data.effects / np.sqrt(data.stderrs**2 + np.asarray(tau2, dtype=float))
    return snd, p


def apply_selection(data: MetaDataset, spec: ScenarioSpec, seed, tau2=0.0) -> MetaDataset:
    """Apply a selection scenario to a complete dataset.

    ``tau2`` is the between-study variance used in the SND of scenario P
    (the generative value in simulation). Studies left with no reported
    outcome are dropped.
    """
    if spec.kind == "none":
        return data
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    snd, p = _selection_inputs(data, tau2)
    prob = selection_probability(spec, snd, p)
    if spec.whole_study:
        keep = rng.random(data.m) < prob
        return data.subset(keep)
    keep = (rng.random(prob.shape) < prob) & data.reported
    effects = np.where(keep, data.effects, np.nan)
    stderrs = np.where(keep, data.stderrs, np.nan)
    counts = None
    if data.counts is not None:
        counts = np.where(keep[..., None], data.counts, np.nan)
    out = MetaDataset(effects, stderrs, data.study_ids, data.outcome_labels, counts)
    return out.subset(out.reported.any(axis=1))


def _concat(parts: Sequence[MetaDataset]) -> MetaDataset:
    counts = None
    if parts[0].counts is not None:
        counts = np.concatenate([d.counts for d in parts])
    ds = MetaDataset(
        np.concatenate([d.effects for d in parts]),
        np.concatenate([d.stderrs for d in parts]),
        None, parts[0].outcome_labels, counts,
    )
    return ds


@dataclass(frozen=True)
class BinaryDesign:
    """Two-group binary outcome generator.

    For each study, group totals are uniform integers in ``group_size`` and
    the control-group exposure probability is uniform in ``base_rate``; the
    other group's probability has log-odds shifted by the study's true effect.
    """

    outcomes: tuple = (0,)
    group_size: tuple = (30, 300)
    base_rate: tuple = (0.1, 0.9)


def simulate_binary_dataset(params: ModelParams, m: int, seed, design: BinaryDesign = BinaryDesign()) -> MetaDataset:
    """Complete studies where ``design.outcomes`` are log odds ratios from 2x2 tables.

    Continuous outcomes follow the usual model; binary outcomes get their
    sampling error from the simulated counts (no within-study correlation).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    J = params.J
    theta, s, y = draw_studies(params, m, rng)
    effects = y.copy()
    stderrs = s.copy()
    counts = np.full((m, J, 4), np.nan)
    lo, hi = design.group_size
    for j in design.outcomes:
        n1 = rng.integers(lo, hi + 1, size=m)
        n0 = rng.integers(lo, hi + 1, size=m)
        q0 = rng.uniform(*design.base_rate, size=m)
        q1 = expit(np.log(q0 / (1 - q0)) + theta[:, j])
        a = rng.binomial(n1, q1)
        b = rng.binomial(n0, q0)
        tab = np.column_stack([a, b, n1 - a, n0 - b]).astype(float)
        counts[:, j] = tab
        effects[:, j], var = logor_naive(_haldane(tab, True))
        stderrs[:, j] = np.sqrt(var)
    return MetaDataset(effects, stderrs, counts=counts)


def simulate_selected_dataset(params: ModelParams, n: int, spec: ScenarioSpec, seed,
                              binary: Optional[BinaryDesign] = None, max_batches: int = 200) -> MetaDataset:
    """Generate ``3n`` studies, select, and sample ``n`` survivors without replacement.

    When fewer than ``n`` studies survive, further batches of ``3n`` are
    generated and pooled until there are enough.
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def batch(size):
        if binary is None:
            return generate_dataset(params, size, rng)
        return simulate_binary_dataset(params, size, rng, binary)

    if spec.kind == "none":
        return batch(n)
    survivors = []
    total = 0
    for _ in range(max_batches):
        sel = apply_selection(batch(3 * n), spec, rng, tau2=params.tau2)
        if sel.m:
            survivors.append(sel)
            total += sel.m
        if total >= n:
            break
    else:
        raise RuntimeError(f"selection retry cap exceeded: {total} of {n} studies after {max_batches} batches")
    pool = _concat(survivors)
    rows = np.sort(rng.choice(pool.m, size=n, replace=False))
    return pool.subset(rows)


# ---------------------------------------------------------------------------
# tests applied per replicate
# ---------------------------------------------------------------------------

TESTS = ("msset", "msset_smooth", "egger1", "egger", "egger1_smooth", "egger_smooth", "begg1", "begg")


def _egger_all(data, variances):
    out = []
    fit = fit_null(data, variances=variances)
    for tr in fit.transforms:
        out.append(egger_test(tr))
    return out


def replicate_decisions(data: MetaDataset, tests: Sequence[str], smooth_outcomes=()) -> dict:
    """p-value per requested test; ``None`` where the test failed on this dataset."""
    out = {}
    cache = {}

    def egger_results(smooth):
        key = ("egger", smooth)
        if key not in cache:
            cache[key] = _egger_all(data, within_variances(data, smooth_outcomes if smooth else ()))
        return cache[key]

    for name in tests:
        try:
            if name in ("msset", "msset_smooth"):
                res = run_msset(data, smooth_outcomes=smooth_outcomes if name == "msset_smooth" else (),
                                validate=False)
                out[name] = res.p_value
            elif name.startswith("egger"):
                res = egger_results(name.endswith("_smooth"))
                out[name] = res[0].p_value if name.startswith("egger1") else bonferroni_combine(res).p_value
            elif name.startswith("begg"):
                js = [0] if name == "begg1" else range(data.J)
                res = []
                for j in js:
                    rep = data.reported[:, j]
                    res.append(begg_test(data.effects[rep, j], data.stderrs[rep, j], 0.0))
                out[name] = bonferroni_combine(res).p_value
            else:
                raise KeyError(name)
        except KeyError:
            raise ValueError(f"unknown test {name!r}") from None
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.debug("replicate test %s failed: %s", name, exc)
            out[name] = None
    return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    n_list: tuple = (100,)
    tau2_list: tuple = (0.9,)
    rho_W: float = 0.0
    rho_B: float = 0.0
    beta: tuple = (0.0, 0.0)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    alpha: float = 0.10
    replicates: int = 5000
    tests: tuple = ("msset", "egger1", "egger", "begg1", "begg")
    seed: int = 20240101
    binary: Optional[BinaryDesign] = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        for t in self.tests:
            if t not in TESTS:
                raise ValueError(f"unknown test {t!r}")
            if t.endswith("_smooth") and self.binary is None:
                raise ValueError(f"test {t!r} needs a binary design")

    def cells(self):
        return [(n, t2) for n in self.n_list for t2 in self.tau2_list]

    def params(self, tau2) -> ModelParams:
        J = len(self.beta)
        return ModelParams(self.beta, np.full(J, tau2), self.rho_B, self.rho_W, default_s_dist)


@dataclass(frozen=True)
class CellResult:
    n: int
    tau2: float
    test: str
    rejections: int
    failures: int
    replicates: int

    @property
    def completed(self) -> int:
        return self.replicates - self.failures

    @property
    def rate(self) -> float:
        return self.rejections / self.completed if self.completed else float("nan")

    @property
    def mc_se(self) -> float:
        r = self.rate
        return float(np.sqrt(r * (1 - r) / self.completed)) if self.completed else float("nan")

    def to_dict(self) -> dict:
        return {"n": self.n, "tau2": self.tau2, "test": self.test, "rejections": self.rejections,
                "failures": self.failures, "replicates": self.replicates,
                "rate": self.rate, "mc_se": self.mc_se}


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    cells: tuple

    def get(self, n, tau2, test) -> CellResult:
        for c in self.cells:
            if c.n == n and np.isclose(c.tau2, tau2) and c.test == test:
                return c
        raise KeyError((n, tau2, test))

    def to_rows(self) -> list[dict]:
        return [c.to_dict() for c in self.cells]


def replicate_seed(seed: int, cell: int, rep: int) -> np.random.SeedSequence:
    """Counter-derived seed: replicate ``rep`` of cell ``cell`` never depends on scheduling."""
    return np.random.SeedSequence(seed, spawn_key=(cell, rep))


def simulate_replicate(config: ExperimentConfig, cell: int, rep: int) -> MetaDataset:
    n, tau2 = config.cells()[cell]
    rng = np.random.default_rng(replicate_seed(config.seed, cell, rep))
    return simulate_selected_dataset(config.params(tau2), n, config.scenario, rng, binary=config.binary)


def _run_chunk(args):
    config, cell, start, stop = args
    smooth = config.binary.outcomes if config.binary is not None else ()
    rej = np.zeros(len(config.tests), dtype=np.int64)
    fail = np.zeros(len(config.tests), dtype=np.int64)
    for rep in range(start, stop):
        data = simulate_replicate(config, cell, rep)
        pv = replicate_decisions(data, config.tests, smooth)
        for k, t in enumerate(config.tests):
            if pv[t] is None:
                fail[k] += 1
            elif pv[t] <= config.alpha:
                rej[k] += 1
    return cell, rej, fail


def run_experiment(config: ExperimentConfig, chunk_size: int = 250) -> ExperimentResult:
    """Rejection rates for every (n, tau2) cell and configured test.

    Replicates are independent and seeded by counter, and per-chunk counts
    are summed, so the output does not depend on ``config.n_jobs``.
    """
    cells = config.cells()
    jobs = []
    for c in range(len(cells)):
        for start in range(0, config.replicates, chunk_size):
            jobs.append((config, c, start, min(start + chunk_size, config.replicates)))
    rej = np.zeros((len(cells), len(config.tests)), dtype=np.int64)
    fail = np.zeros_like(rej)
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as ex:
            results = list(ex.map(_run_chunk, jobs))
    else:
        results = map(_run_chunk, jobs)
    for c, r, f in results:
        rej[c] += r
        fail[c] += f
    out = []
    for c, (n, tau2) in enumerate(cells):
        for k, t in enumerate(config.tests):
            out.append(CellResult(n, float(tau2), t, int(rej[c, k]), int(fail[c, k]), config.replicates))
    return ExperimentResult(config, tuple(out))
