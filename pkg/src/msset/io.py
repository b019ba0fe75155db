"""Dataset files, funnel-plot export, batch concordance and experiment configs.

Three CSV layouts are understood:

``wide``
    ``study_id,y1,s1,y2,s2,...`` - one row per study, empty cells for
    unreported outcomes. Effect column names become outcome labels.
``long``
    ``study_id,outcome,y,s`` - one row per reported (study, outcome).
``counts``
    ``study_id,outcome,a,b,c,d`` - 2x2 tables of binary outcomes; effects
    are log odds ratios with the usual variance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .heterogeneity import _haldane, dl_tau2, logor_naive
from .model import MetaDataset, validate_dataset
from .score_test import run_msset
from .selection import BinaryDesign, ExperimentConfig, ScenarioSpec
from .univariate import bonferroni_combine, egger_test

__all__ = [
    "DatasetFormatError",
    "DatasetValidationError",
    "FORMATS",
    "parse_dataset",
    "write_dataset",
    "funnel_data",
    "funnel_export",
    "ConcordanceTable",
    "screen_dataset",
    "batch_concordance",
    "parse_experiment_config",
]

FORMATS = ("wide", "long", "counts")
HEADERS = {"long": ["study_id", "outcome", "y", "s"], "counts": ["study_id", "outcome", "a", "b", "c", "d"]}


class DatasetFormatError(ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DatasetValidationError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid dataset: " + "; ".join(self.problems))


def _float(text, line, path, what):
    try:
        return float(text)
    except ValueError:
        raise DatasetFormatError(f"cannot parse {what} {text!r} as a number", line, path) from None


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    # drop trailing blank lines, keep numbering of the rest
    numbered = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not numbered:
        raise DatasetFormatError("empty file", path=path)
    return numbered


def _parse_wide(rows, path):
    (hline, header), body = rows[0], rows[1:]
    header = [h.strip() for h in header]
    if header[0] != "study_id" or len(header) < 3 or (len(header) - 1) % 2:
        raise DatasetFormatError("wide header must be study_id followed by effect,stderr column pairs", hline, path)
    if header[1:3] == ["outcome", "y"] or header[1:3] == ["outcome", "a"]:
        raise DatasetFormatError("file looks like long/counts format, not wide", hline, path)
    J = (len(header) - 1) // 2
    labels = header[1::2]
    ids, effects, stderrs = [], [], []
    for line, row in body:
        if len(row) != len(header):
            raise DatasetFormatError(f"expected {len(header)} fields, got {len(row)}", line, path)
        ids.append(row[0].strip())
        ye, se = [], []
        for j in range(J):
            y, s = row[1 + 2 * j].strip(), row[2 + 2 * j].strip()
            if (y == "") != (s == ""):
                raise DatasetFormatError(f"outcome {labels[j]!r} has an effect or stderr but not both", line, path)
            ye.append(np.nan if y == "" else _float(y, line, path, "effect"))
            se.append(np.nan if s == "" else _float(s, line, path, "stderr"))
        effects.append(ye)
        stderrs.append(se)
    if not ids:
        raise DatasetFormatError("no data rows", path=path)
    return MetaDataset(np.array(effects), np.array(stderrs), ids, labels)


def _parse_keyed(rows, path, fmt):
    (hline, header), body = rows[0], rows[1:]
    header = [h.strip() for h in header]
    if header != HEADERS[fmt]:
        raise DatasetFormatError(f"{fmt} header must be {','.join(HEADERS[fmt])}", hline, path)
    ids, labels, cells = [], [], {}
    for line, row in body:
        if len(row) != len(header):
            raise DatasetFormatError(f"expected {len(header)} fields, got {len(row)}", line, path)
        sid, lab = row[0].strip(), row[1].strip()
        if not sid or not lab:
            raise DatasetFormatError("empty study_id or outcome", line, path)
        if (sid, lab) in cells:
            raise DatasetFormatError(f"duplicate row for study {sid!r}, outcome {lab!r}", line, path)
        vals = [_float(v.strip(), line, path, name) for v, name in zip(row[2:], header[2:])]
        if fmt == "counts":
            if any(v < 0 or v != int(v) for v in vals):
                raise DatasetFormatError("2x2 counts must be nonnegative integers", line, path)
            a, b, c, d = vals
            if a + c <= 0 or b + d <= 0:
                raise DatasetFormatError("2x2 table needs positive a+c and b+d", line, path)
        cells[(sid, lab)] = vals
        if sid not in ids:
            ids.append(sid)
        if lab not in labels:
            labels.append(lab)
    if not ids:
        raise DatasetFormatError("no data rows", path=path)
    m, J = len(ids), len(labels)
    effects = np.full((m, J), np.nan)
    stderrs = np.full((m, J), np.nan)
    counts = np.full((m, J, 4), np.nan) if fmt == "counts" else None
    row_of = {s: i for i, s in enumerate(ids)}
    col_of = {s: j for j, s in enumerate(labels)}
    for (sid, lab), vals in cells.items():
        i, j = row_of[sid], col_of[lab]
        if fmt == "long":
            effects[i, j], stderrs[i, j] = vals
        else:
            counts[i, j] = vals
            y, v = logor_naive(_haldane([vals], True))
            effects[i, j], stderrs[i, j] = y[0], np.sqrt(v[0])
    return MetaDataset(effects, stderrs, ids, labels, counts)


def parse_dataset(path, format: str = "wide", validate: bool = True, min_studies: int = 0) -> MetaDataset:
    """Read a dataset file.

    ``validate`` runs :func:`~msset.model.validate_dataset` with
    ``min_studies`` reporting studies per outcome; the default only checks
    structure, the tests themselves require at least 3.

    Raises
    ------
    DatasetFormatError
        Malformed content (with the offending line number).
    DatasetValidationError
        Parsed fine but failed :func:`~msset.model.validate_dataset`.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    rows = _read_rows(path)
    data = _parse_wide(rows, path) if format == "wide" else _parse_keyed(rows, path, format)
    if validate:
        problems = validate_dataset(data, min_studies)
        if problems:
            raise DatasetValidationError(problems)
    return data


def _fmt(v) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_dataset(data: MetaDataset, path, format: str = "wide") -> None:
    """Write ``data`` so that :func:`parse_dataset` reads it back identically."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if format == "wide":
            header = ["study_id"]
            for j, lab in enumerate(data.outcome_labels):
                header += [lab, f"s{j + 1}"]
            w.writerow(header)
            for i, sid in enumerate(data.study_ids):
                row = [sid]
                for j in range(data.J):
                    row += [_fmt(data.effects[i, j]), _fmt(data.stderrs[i, j])]
                w.writerow(row)
        elif format == "long":
            w.writerow(HEADERS["long"])
            for i, sid in enumerate(data.study_ids):
                for j, lab in enumerate(data.outcome_labels):
                    if data.reported[i, j]:
                        w.writerow([sid, lab, _fmt(data.effects[i, j]), _fmt(data.stderrs[i, j])])
        elif format == "counts":
            if data.counts is None:
                raise ValueError("dataset has no 2x2 counts")
            w.writerow(HEADERS["counts"])
            for i, sid in enumerate(data.study_ids):
                for j, lab in enumerate(data.outcome_labels):
                    if data.reported[i, j]:
                        w.writerow([sid, lab] + [str(int(v)) for v in data.counts[i, j]])
        else:
            raise ValueError(f"unknown format {format!r}")


# ---------------------------------------------------------------------------
# funnel plot data
# ---------------------------------------------------------------------------

FUNNEL_COLUMNS = ("effect", "stderr", "pooled_estimate", "ci_low_bound", "ci_high_bound")


def funnel_data(data: MetaDataset, outcome: int) -> np.ndarray:
    """Rows of ``effect, stderr, pooled_estimate, ci_low_bound, ci_high_bound``.

    The pooled estimate is the random-effects mean with the DL between-study
    variance; the bounds are ``pooled +/- 1.96 * stderr`` (pseudo 95% funnel).
    """
    rep = data.reported[:, outcome]
    if not rep.any():
        raise ValueError(f"outcome {data.outcome_labels[outcome]!r} never reported")
    y, s = data.effects[rep, outcome], data.stderrs[rep, outcome]
    tau2 = dl_tau2(y, s) if y.size >= 2 else 0.0
    w = 1 / (s**2 + tau2)
    pooled = (w * y).sum() / w.sum()
    return np.column_stack([y, s, np.full_like(y, pooled), pooled - 1.96 * s, pooled + 1.96 * s])


def funnel_export(data: MetaDataset, outcome: int, out_path) -> None:
    rows = funnel_data(data, outcome)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUNNEL_COLUMNS)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


# ---------------------------------------------------------------------------
# batch concordance
# ---------------------------------------------------------------------------

@dataclass
class ConcordanceTable:
    """2x2 counts; ``counts[msset_decision, comparator_decision]``."""

    comparator: str
    alpha: float
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"comparator": self.comparator, "alpha": self.alpha, "counts": self.counts.tolist()}


def screen_dataset(data: MetaDataset, min_studies: int = 10):
    """Return ``None`` if the dataset qualifies, else the violated criterion."""
    if data.m < min_studies:
        return f"criterion (a): {data.m} studies < {min_studies}"
    if data.J != 2:
        return f"criterion (b): {data.J} outcomes, need exactly 2"
    if not data.reported.all(axis=1).any():
        return "criterion (c): no study reports both outcomes"
    return None


def _read_manifest(path):
    base = Path(path).parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            fmt = parts[1] if len(parts) > 1 and parts[1] else "wide"
            p = Path(parts[0])
            entries.append((parts[0], base / p if not p.is_absolute() else p, fmt))
    return entries


def batch_concordance(manifest_path, alpha: float = 0.10, decisions_csv=None, min_studies: int = 10):
    """MSSET against Egger_1, Egger_2 and Egger-Bonferroni over a manifest of datasets.

    The manifest lists one ``path[,format]`` per line (``#`` comments).
    Returns ``(tables, decisions, skipped)``; ``tables`` maps comparator
    name to :class:`ConcordanceTable`, in manifest order throughout.
    """
    entries = _read_manifest(manifest_path)
    if not entries:
        raise ValueError("empty manifest")
    comparators = ("egger1", "egger2", "egger_bonferroni")
    tables = {c: ConcordanceTable(c, alpha, np.zeros((2, 2), dtype=int)) for c in comparators}
    decisions, skipped = [], []
    for name, path, fmt in entries:
        try:
            data = parse_dataset(path, fmt, validate=False)
        except (OSError, ValueError) as exc:
            skipped.append({"dataset": name, "reason": f"unreadable: {exc}"})
            continue
        reason = screen_dataset(data, min_studies)
        if reason is None:
            problems = validate_dataset(data)
            reason = "; ".join(problems) if problems else None
        if reason is not None:
            skipped.append({"dataset": name, "reason": reason})
            continue
        try:
            res = run_msset(data)
            eggers = [egger_test(t) for t in res.fit.transforms]
        except ValueError as exc:
            skipped.append({"dataset": name, "reason": f"computation failed: {exc}"})
            continue
        p = {
            "msset": res.p_value,
            "egger1": eggers[0].p_value,
            "egger2": eggers[1].p_value,
            "egger_bonferroni": bonferroni_combine(eggers).p_value,
        }
        s = {k: int(v < alpha) for k, v in p.items()}
        for c in comparators:
            tables[c].counts[s["msset"], s[c]] += 1
        decisions.append({"dataset": name, "m": data.m,
                          **{f"p_{k}": v for k, v in p.items()}, **{f"S_{k}": v for k, v in s.items()}})
    if decisions_csv is not None:
        cols = ["dataset", "m"] + [f"p_{k}" for k in ("msset",) + comparators] + \
               [f"S_{k}" for k in ("msset",) + comparators]
        with open(decisions_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            w.writerows(decisions)
    return tables, decisions, skipped


# ---------------------------------------------------------------------------
# experiment configs
# ---------------------------------------------------------------------------

def _floats(v):
    return tuple(float(x) for x in v.split(","))


_CONFIG_KEYS = {
    "n_list": lambda v: tuple(int(x) for x in v.split(",")),
    "tau2_list": _floats,
    "rho_W": float,
    "rho_B": float,
    "beta": _floats,
    "alpha": float,
    "replicates": int,
    "tests": lambda v: tuple(x.strip() for x in v.split(",")),
    "seed": int,
    "n_jobs": int,
}


def parse_experiment_config(path) -> ExperimentConfig:
    """Read a flat ``key = value`` experiment file (``#`` starts a comment).

    Besides the :class:`~msset.selection.ExperimentConfig` fields, accepts
    ``scenario`` (none, C1, C2, C3, P), ``scenario_levels`` (four
    probabilities for a custom C grid), ``binary_outcomes`` (1-based),
    ``group_size`` and ``base_rate``.
    """
    kw, extra = {}, {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetFormatError("expected key = value", n, path)
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                if key in _CONFIG_KEYS:
                    kw[key] = _CONFIG_KEYS[key](value)
                elif key in ("scenario", "scenario_levels", "binary_outcomes", "group_size", "base_rate"):
                    extra[key] = value
                else:
                    raise DatasetFormatError(f"unknown key {key!r}", n, path)
            except ValueError as exc:
                if isinstance(exc, DatasetFormatError):
                    raise
                raise DatasetFormatError(f"bad value for {key}: {value!r}", n, path) from None
    if "scenario_levels" in extra:
        kw["scenario"] = ScenarioSpec.C(_floats(extra["scenario_levels"]), kind="custom")
    elif "scenario" in extra:
        kw["scenario"] = ScenarioSpec(extra["scenario"])
    if "binary_outcomes" in extra:
        outs = tuple(int(x) - 1 for x in extra["binary_outcomes"].split(","))
        bd = {"outcomes": outs}
        if "group_size" in extra:
            bd["group_size"] = tuple(int(x) for x in extra["group_size"].split(","))
        if "base_rate" in extra:
            bd["base_rate"] = _floats(extra["base_rate"])
        kw["binary"] = BinaryDesign(**bd)
    return ExperimentConfig(**kw)


def experiment_to_json(result) -> str:
    cfg = result.config
    meta = {"n_list": list(cfg.n_list), "tau2_list": list(cfg.tau2_list), "rho_W": cfg.rho_W,
            "rho_B": cfg.rho_B, "beta": list(cfg.beta), "scenario": cfg.scenario.kind,
            "alpha": cfg.alpha, "replicates": cfg.replicates, "tests": list(cfg.tests), "seed": cfg.seed}
    return json.dumps({"config": meta, "cells": result.to_rows()}, indent=2)


def experiment_to_csv(result, path) -> None:
    rows = result.to_rows()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
