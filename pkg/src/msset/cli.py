"""Command-line interface.

Subcommands::

    msset test      --input PATH [--format wide|long|counts] [--test msset|egger|begg|all] ...
    msset funnel    --input PATH --outcome LABEL --out PATH
    msset batch     --manifest PATH [--alpha A] [--decisions-csv PATH] [--json]
    msset simulate  --config PATH [--out-csv PATH] [--out-json PATH] [--n-jobs K]

Exit codes: 0 success, 1 computation error, 2 invalid input, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io
from .model import MIN_STUDIES_PER_OUTCOME, MetaDataset
from .score_test import MssetError, fit_null, run_msset, within_variances
from .selection import run_experiment
from .univariate import begg_test, bonferroni_combine, egger_test

EXIT_OK, EXIT_COMPUTE, EXIT_INVALID, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msset", description="Score test for small-study effects in multivariate meta-analysis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("test", help="run MSSET / Egger / Begg on one dataset")
    t.add_argument("--input", required=True)
    t.add_argument("--format", choices=io.FORMATS, default="wide")
    t.add_argument("--test", choices=("msset", "egger", "begg", "all"), default="all")
    t.add_argument("--alpha", type=float, default=0.10)
    t.add_argument("--binary-outcomes", default=None,
                   help="comma-separated outcome labels or 1-based indices with 2x2 counts")
    t.add_argument("--smooth", action="store_true", help="smoothed log-OR variances for binary outcomes")
    t.add_argument("--m-convention", choices=("per-outcome", "total"), default="per-outcome")
    t.add_argument("--sigma-aa", choices=("sandwich", "bootstrap"), default="sandwich")
    t.add_argument("--bootstrap-reps", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--json", action="store_true")

    f = sub.add_parser("funnel", help="export funnel-plot data for one outcome")
    f.add_argument("--input", required=True)
    f.add_argument("--format", choices=io.FORMATS, default="wide")
    f.add_argument("--outcome", required=True, help="outcome label or 1-based index")
    f.add_argument("--out", required=True)

    b = sub.add_parser("batch", help="concordance of MSSET and Egger over many datasets")
    b.add_argument("--manifest", required=True)
    b.add_argument("--alpha", type=float, default=0.10)
    b.add_argument("--decisions-csv", default=None)
    b.add_argument("--json", action="store_true")

    s = sub.add_parser("simulate", help="Monte Carlo rejection rates from a key = value config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-csv", default=None)
    s.add_argument("--out-json", default=None)
    s.add_argument("--n-jobs", type=int, default=None)
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load(path, fmt, min_studies=MIN_STUDIES_PER_OUTCOME) -> MetaDataset:
    try:
        return io.parse_dataset(path, fmt, min_studies=min_studies)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _outcome_indices(data: MetaDataset, spec: str) -> list[int]:
    out = []
    for tok in (t.strip() for t in spec.split(",")):
        if tok in data.outcome_labels:
            out.append(data.outcome_labels.index(tok))
        elif tok.isdigit() and 1 <= int(tok) <= data.J:
            out.append(int(tok) - 1)
        else:
            raise InputError(f"unknown outcome {tok!r}; have {', '.join(data.outcome_labels)}")
    return sorted(set(out))


def _fmt_p(p) -> str:
    return f"{p:.4f}" if p >= 1e-4 else f"{p:.2e}"


def _egger_results(data, variances):
    fit = fit_null(data, variances=variances)
    res = []
    for j, tr in enumerate(fit.transforms):
        try:
            res.append(egger_test(tr))
        except ValueError as exc:
            raise MssetError(exc, data.outcome_labels[j], "egger") from None
    return res


def _begg_results(data, variances):
    res = []
    for j in range(data.J):
        rep = data.reported[:, j]
        try:
            res.append(begg_test(data.effects[rep, j], np.sqrt(variances[rep, j])))
        except ValueError as exc:
            raise MssetError(exc, data.outcome_labels[j], "begg") from None
    return res


def _univariate_block(results, alpha):
    comb = bonferroni_combine(results)
    return {
        "per_outcome": [r.to_dict() for r in results],
        "bonferroni": {"statistic": comb.statistic, "p_value": comb.p_value,
                       "reject": bool(comb.p_value < alpha)},
    }


def _text_report(data, report) -> str:
    labels = data.outcome_labels
    width = max(16, *(len(l) + 2 for l in labels))
    lines = [f"{data.m} studies, {data.J} outcome(s); alpha = {report['alpha']}",
             f"{'Test':<18}" + "".join(f"{l:>{width}}" for l in labels)]
    tests = report["tests"]
    for name, title in (("egger", "Egger"), ("begg", "Begg")):
        block = tests[name]
        if block is None:
            continue
        lines.append(f"{title:<18}" + "".join(f"{_fmt_p(r['p_value']):>{width}}" for r in block["per_outcome"]))
        if data.J > 1:
            lines.append(f"{title + '-Bonferroni':<18}{_fmt_p(block['bonferroni']['p_value']):>{width}}")
    ms = tests["msset"]
    if ms is not None:
        lines.append(f"{'MSSET':<18}{_fmt_p(ms['p_value']):>{width}}")
        lines.append(f"  statistic = {ms['statistic']:.4f} on {ms['df']} df, lambda_bar = {ms['lambda_bar']:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_test(args, out) -> int:
    data = _load(args.input, args.format)
    if not 0 < args.alpha <= 1:
        raise InputError("--alpha must lie in (0, 1]")
    binary = []
    if args.binary_outcomes:
        binary = _outcome_indices(data, args.binary_outcomes)
    elif args.format == "counts":
        binary = list(range(data.J))
    if binary and data.counts is None:
        raise InputError("binary outcomes need 2x2 counts (use --format counts)")
    if args.smooth and not binary:
        raise InputError("--smooth needs binary outcomes")
    smooth = binary if args.smooth else []

    variances = within_variances(data, smooth)
    tests = {"msset": None, "egger": None, "begg": None}
    want = ("msset", "egger", "begg") if args.test == "all" else (args.test,)
    if "msset" in want:
        res = run_msset(data, smooth_outcomes=smooth, m_convention=args.m_convention,
                        sigma_method=args.sigma_aa, bootstrap_reps=args.bootstrap_reps, seed=args.seed)
        tests["msset"] = {**res.to_dict(), "reject": bool(res.p_value < args.alpha)}
    if "egger" in want:
        tests["egger"] = _univariate_block(_egger_results(data, variances), args.alpha)
    if "begg" in want:
        tests["begg"] = _univariate_block(_begg_results(data, variances), args.alpha)
    report = {
        "input": str(args.input),
        "format": args.format,
        "alpha": args.alpha,
        "m": data.m,
        "J": data.J,
        "outcome_labels": list(data.outcome_labels),
        "m_j": data.m_j.tolist(),
        "binary_outcomes": [data.outcome_labels[j] for j in binary],
        "smooth": bool(args.smooth),
        "tests": tests,
    }
    text = json.dumps(report, indent=2) if args.json else _text_report(data, report)
    print(text, file=out)
    return EXIT_OK


def _cmd_funnel(args, out) -> int:
    data = _load(args.input, args.format, min_studies=0)
    j = _outcome_indices(data, args.outcome)
    if len(j) != 1:
        raise InputError("--outcome must name exactly one outcome")
    io.funnel_export(data, j[0], args.out)
    print(f"wrote {data.m_j[j[0]]} rows to {args.out}", file=out)
    return EXIT_OK


def _cmd_batch(args, out) -> int:
    try:
        tables, decisions, skipped = io.batch_concordance(args.manifest, args.alpha, args.decisions_csv)
    except OSError as exc:
        raise InputError(f"cannot read {args.manifest}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.json:
        print(json.dumps({"alpha": args.alpha, "tables": {k: t.to_dict() for k, t in tables.items()},
                          "decisions": decisions, "skipped": skipped}, indent=2), file=out)
        return EXIT_OK
    lines = [f"{len(decisions)} datasets analysed, {len(skipped)} skipped; alpha = {args.alpha}"]
    for name, t in tables.items():
        c = t.counts
        lines += [f"MSSET vs {name}", f"{'':>10}{'S=1':>6}{'S=0':>6}",
                  f"{'MSSET S=1':>10}{c[1, 1]:>6}{c[1, 0]:>6}", f"{'MSSET S=0':>10}{c[0, 1]:>6}{c[0, 0]:>6}"]
    for s in skipped:
        lines.append(f"skipped {s['dataset']}: {s['reason']}")
    print("\n".join(lines), file=out)
    return EXIT_OK


def _cmd_simulate(args, out) -> int:
    try:
        cfg = io.parse_experiment_config(args.config)
    except OSError as exc:
        raise InputError(f"cannot read {args.config}: {exc.strerror or exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if args.n_jobs is not None:
        from dataclasses import replace
        cfg = replace(cfg, n_jobs=args.n_jobs)
    result = run_experiment(cfg)
    if args.out_csv:
        io.experiment_to_csv(result, args.out_csv)
    text = io.experiment_to_json(result)
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    if not args.out_csv and not args.out_json:
        print(text, file=out)
    return EXIT_OK


_COMMANDS = {"test": _cmd_test, "funnel": _cmd_funnel, "batch": _cmd_batch, "simulate": _cmd_simulate}


def main(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args, out)
    except InputError as exc:
        print(f"msset: invalid input: {exc}", file=err)
        return EXIT_INVALID
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"msset: computation failed: {exc}", file=err)
        return EXIT_COMPUTE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
