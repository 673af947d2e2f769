"""Command-line interface.

Exit codes: 0 success, 2 input error, 3 fit did not converge,
4 fit converged but some intercept is not identifiable.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .baselines import BaselineError, odds_ratios, prospective_fit
from .estimator import ESE_OVERFLOW, FitOptions, FitResult, fit
from .io import read_csv, write_csv
from .model import DataError, PooledData
from .simulator import (
    format_tables,
    get_scenario,
    run_scenario,
    simulate_data,
    tables_to_json,
    tables_to_tsv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_DEGENERATE = 4


def _num(v: float) -> str:
    if math.isnan(v):
        return "NA"
    if math.isinf(v) or abs(v) > ESE_OVERFLOW:
        return "*"
    return f"{v:.4f}"


def _clean(x):
    if isinstance(x, list):
        return [_clean(v) for v in x]
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _jsonable(a):
    # JSON has no inf/nan: inf -> "inf", nan -> null
    return _clean(np.asarray(a, dtype=float).tolist())


def _options(args) -> FitOptions:
    kw = dict(hessian_mode=args.hessian, constraint=args.constraint)
    if args.tol is not None:
        kw.update(theta_tol=args.tol, mass_tol=args.tol)
    if args.max_iters is not None:
        kw["max_outer_iters"] = args.max_iters
    return FitOptions(**kw)


def format_fit(res: FitResult, data: PooledData) -> str:
    ci = res.confidence_intervals()
    lines = [
        f"pooled fit: K = {data.K} studies, d = {data.d}, N = {data.N}",
        f"status: {res.status} after {res.iterations} iterations; "
        f"log-likelihood {res.loglik:.6f}; max|score| {res.score_norm:.2e}",
    ]
    if res.message:
        lines.append(f"message: {res.message}")
    lines.append("")
    w = max(len(s) for s in res.labels)
    lines.append(f"{'parameter':<{w}}  {'estimate':>10}  {'ESE':>10}  {'95% CI':>23}")
    for lab, est, se, (lo, hi) in zip(res.labels, res.estimates, res.ese, ci):
        interval = f"[{_num(lo)}, {_num(hi)}]" if np.isfinite(se) and se <= ESE_OVERFLOW else "unbounded"
        lines.append(f"{lab:<{w}}  {est:>10.4f}  {_num(se):>10}  {interval:>23}")
    lines.append("")
    for k, c in enumerate(res.c_hat, start=1):
        lines.append(f"case rate c_{k}: {c:.4f}")
    if res.flags is not None:
        lines.append("")
        lines.append(res.flags.format())
    return "\n".join(lines)


def format_odds_ratios(res: FitResult, data: PooledData) -> str:
    """Per-study odds ratios from the pooled fit next to single-study prospective fits."""
    K, d = data.K, data.d
    lines = ["odds ratios exp(beta) with 95% limits", ""]
    head = f"{'':<10}{'pooled':>30}    {'single study':>30}"
    lines.append(head)
    for k, study in enumerate(data.studies):
        idx = K + k * d + np.arange(d)
        pooled = odds_ratios(res.estimates[idx], res.ese[idx])
        try:
            pf = prospective_fit(study)
            single = odds_ratios(pf.beta, pf.ese[1:])
        except BaselineError:
            single = np.full((d, 3), np.nan)
        for j in range(d):
            a = "{:.4f} ({:.4f}, {:.4f})".format(*pooled[j])
            b = "{:.4f} ({:.4f}, {:.4f})".format(*single[j])
            lines.append(f"{f'beta_{k + 1}_{j + 1}':<10}{a:>30}    {b:>30}")
    return "\n".join(lines)


def fit_to_json(res: FitResult) -> dict:
    return {
        "labels": list(res.labels),
        "theta": res.estimates.tolist(),
        "ese": _jsonable(res.ese),
        "cov": _jsonable(res.covariance),
        "c_hat": _jsonable(res.c_hat),
        "p_hat": res.p_hat.tolist(),
        "loglik": res.loglik,
        "iterations": res.iterations,
        "converged": res.converged,
        "status": res.status,
        "message": res.message,
        "score_norm": res.score_norm,
        "trace": list(res.trace),
        "flags": res.flags.to_dict() if res.flags is not None else None,
    }


def _fit_exit(res: FitResult) -> int:
    if not res.converged:
        return EXIT_NOT_CONVERGED
    if res.flags is not None and res.flags.degenerate:
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_fit(args) -> int:
    data = read_csv(args.input)
    res = fit(data, _options(args))
    print(format_fit(res, data))
    if args.odds_ratios:
        print()
        print(format_odds_ratios(res, data))
    if args.out:
        Path(args.out).write_text(json.dumps(fit_to_json(res), indent=2) + "\n", encoding="utf-8")
    return _fit_exit(res)


def cmd_diagnose(args) -> int:
    data = read_csv(args.input)
    res = fit(data, _options(args))
    from .diagnostics import identifiability_report

    report = identifiability_report(res.theta_hat, res.covariance, data.K, data.d, level=args.level)
    if not res.converged:
        print(f"warning: fit status {res.status}: {res.message}")
    print(report.format())
    if not res.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_DEGENERATE if report.degenerate else EXIT_OK


def cmd_simulate(args) -> int:
    scenario = get_scenario(args.scenario)
    estimators = [e for e in args.estimators.split(",") if e.strip()]
    opts = FitOptions(hessian_mode=args.hessian, constraint=args.constraint)
    tables = run_scenario(
        scenario, estimators, reps=args.reps, seed=args.seed, workers=args.workers, opts=opts
    )
    print(format_tables(tables))
    if args.out:
        out = Path(args.out)
        if out.suffix == ".json":
            out.write_text(tables_to_json(tables) + "\n", encoding="utf-8")
        else:
            out.write_text(tables_to_tsv(tables), encoding="utf-8")
    return EXIT_OK


def cmd_generate(args) -> int:
    scenario = get_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    data = simulate_data(scenario, args.replication, seed=seed)
    write_csv(data, args.out)
    print(f"wrote {data.N} rows ({data.K} studies) to {args.out}")
    return EXIT_OK


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tol", type=float, default=None, help="stopping tolerance for theta and masses (default 1e-10)")
    p.add_argument("--max-iters", type=_positive_int, default=None, help="outer iteration budget")
    p.add_argument("--hessian", choices=["analytic", "fd"], default="analytic")
    p.add_argument("--constraint", choices=["bordered", "free"], default="bordered")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccpool", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit pooled case-control data from a CSV file")
    p.add_argument("input", help="CSV with header study,y,x1,...,xd")
    _add_fit_flags(p)
    p.add_argument("--odds-ratios", action="store_true", help="also print per-study odds ratios")
    p.add_argument("--out", help="write the fit as JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="fit and report intercept identifiability")
    p.add_argument("input")
    _add_fit_flags(p)
    p.add_argument("--level", type=float, default=0.05, help="Wald test level (default 0.05)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="run a simulation scenario")
    p.add_argument("scenario", help="preset a1..a6, b1..b4, or a scenario file")
    p.add_argument("--reps", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--estimators", default="combined",
                   help="comma list of combined, prospective, known_f")
    p.add_argument("--hessian", choices=["analytic", "fd"], default="analytic")
    p.add_argument("--constraint", choices=["bordered", "free"], default="bordered")
    p.add_argument("--out", help="write metrics as .tsv or .json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="write one simulated data set as CSV")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DataError, KeyError, ValueError, OSError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
