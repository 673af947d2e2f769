"""Monte Carlo engine for pooled case-control designs.

A :class:`Scenario` fixes ``K`` logistic models for standard normal
covariates and the case/control counts sampled from each.  Replication ``r``
draws its data from ``numpy.random.default_rng([seed, r])`` alone, so results
do not depend on how replications are spread over worker processes, and the
metrics are accumulated in replication order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .baselines import BaselineError, known_density_fit, prospective_fit
from .density import StandardNormalDensity
from .estimator import ESE_OVERFLOW, FitOptions, fit
from .model import PooledData, StudyData

__all__ = [
    "Scenario",
    "PRESETS",
    "ESTIMATORS",
    "SamplingError",
    "get_scenario",
    "parse_scenario_file",
    "true_case_rate",
    "sample_study",
    "simulate_data",
    "run_scenario",
    "MetricRow",
    "MetricsTable",
    "format_tables",
    "tables_to_tsv",
    "tables_to_json",
]

ESTIMATORS = ("combined", "prospective", "known_density")
_ALIASES = {"known_f": "known_density", "known-f": "known_density", "known": "known_density"}
_Z95 = 1.959963984540054


class SamplingError(RuntimeError):
    """A case or control quota could not be filled within the draw budget."""


@dataclass(frozen=True)
class Scenario:
    name: str
    alphas: tuple[float, ...]
    betas: tuple[tuple[float, ...], ...]
    n1: tuple[int, ...]
    n0: tuple[int, ...]
    reps: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        K = len(self.alphas)
        if K < 1:
            raise ValueError("a scenario needs at least one study")
        if not (len(self.betas) == len(self.n1) == len(self.n0) == K):
            raise ValueError("alpha, beta, n1 and n0 must list one entry per study")
        if len({len(b) for b in self.betas}) != 1 or len(self.betas[0]) < 1:
            raise ValueError("all slope vectors must share one positive dimension")
        if min(self.n1) < 1 or min(self.n0) < 1:
            raise ValueError("case and control counts must be positive")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")

    @property
    def K(self) -> int:
        return len(self.alphas)

    @property
    def d(self) -> int:
        return len(self.betas[0])

    @property
    def N(self) -> int:
        return sum(self.n1) + sum(self.n0)

    def true_theta(self) -> np.ndarray:
        return np.concatenate([self.alphas, np.ravel(self.betas)])

    def replace(self, **kw) -> "Scenario":
        fields = dict(
            name=self.name, alphas=self.alphas, betas=self.betas, n1=self.n1,
            n0=self.n0, reps=self.reps, seed=self.seed,
        )
        fields.update(kw)
        return Scenario(**fields)


def _a(name, t1, t2):
    return Scenario(name, (t1[0], t2[0]), (t1[1:], t2[1:]), (125, 125), (125, 125))


def _b(name, rows):
    # rows: (alpha, beta, n0, n1)
    return Scenario(
        name,
        tuple(float(r[0]) for r in rows),
        tuple((float(r[1]),) for r in rows),
        tuple(int(r[3]) for r in rows),
        tuple(int(r[2]) for r in rows),
    )


_B_STUDIES = {
    1: (-3, 2, 500, 10),
    2: (-2, 3, 20, 300),
    3: (-1, 1, 100, 90),
    4: (1, 2, 200, 20),
    5: (4, -5, 200, 40),
}

PRESETS: dict[str, Scenario] = {
    "a1": _a("a1", (2.0, 2.0, 3.0), (-1.0, 3.0, 2.0)),
    "a2": _a("a2", (2.0, 2.0, 3.0), (2.0, 3.0, -1.0)),
    "a3": _a("a3", (2.0, 2.0, 3.0), (1.0, 0.0, 0.0)),
    "a4": _a("a4", (2.0, 2.0, 3.0), (-1.0, 2.0, 3.0)),
    "a5": _a("a5", (2.0, 0.0, 0.0), (-1.0, 0.0, 0.0)),
    "a6": _a("a6", (2.0, 3.0, 2.0), (2.0, 3.0, 2.0)),
    "b1": _b("b1", [_B_STUDIES[1], _B_STUDIES[2]]),
    "b2": _b("b2", [_B_STUDIES[1], _B_STUDIES[2], _B_STUDIES[3]]),
    "b3": _b("b3", [(-3, 2, 5000, 100), _B_STUDIES[2], (-1, 1, 1000, 900)]),
    "b4": _b("b4", [_B_STUDIES[k] for k in range(1, 6)]),
}


def _numbers(text: str, key: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as err:
        raise ValueError(f"{key}: expected numbers, got {text!r}") from err


def parse_scenario_file(path) -> Scenario:
    """Read a scenario from ``key = value`` lines.

    Keys: ``name``, ``K``, ``alpha`` (K numbers), ``beta`` (K slope vectors
    separated by ``;``), ``n1`` and ``n0`` (K counts each), optional ``reps``
    and ``seed``.  ``#`` starts a comment.
    """
    path = Path(path)
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key.lower()] = value
    missing = {"alpha", "beta", "n1", "n0"} - entries.keys()
    if missing:
        raise ValueError(f"{path}: missing keys {sorted(missing)}")
    alphas = tuple(_numbers(entries["alpha"], "alpha"))
    betas = tuple(tuple(_numbers(b, "beta")) for b in entries["beta"].split(";") if b.strip())
    n1 = tuple(int(v) for v in _numbers(entries["n1"], "n1"))
    n0 = tuple(int(v) for v in _numbers(entries["n0"], "n0"))
    if "k" in entries and int(entries["k"]) != len(alphas):
        raise ValueError(f"{path}: K = {entries['k']} but {len(alphas)} intercepts given")
    return Scenario(
        name=entries.get("name", path.stem),
        alphas=alphas,
        betas=betas,
        n1=n1,
        n0=n0,
        reps=int(entries.get("reps", 1000)),
        seed=int(entries.get("seed", 0)),
    )


def get_scenario(spec: str) -> Scenario:
    """A preset name (``a1``..``a6``, ``b1``..``b4``) or a path to a scenario file."""
    if spec in PRESETS:
        return PRESETS[spec]
    p = Path(spec)
    if p.is_file():
        return parse_scenario_file(p)
    raise KeyError(f"unknown scenario {spec!r}; presets are {', '.join(PRESETS)}")


def true_case_rate(alpha: float, beta, law: StandardNormalDensity | None = None) -> float:
    """Population case rate ``E[phi(alpha + beta'X)]`` under the covariate law."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    law = law or StandardNormalDensity(d=beta.size)
    return law.case_rate(alpha, beta)


def sample_study(
    alpha: float,
    beta,
    n1: int,
    n0: int,
    rng: np.random.Generator,
    study_id: int = 1,
    max_draws: int = 10**8,
) -> StudyData:
    """Draw ``n1`` cases and ``n0`` controls from the population model.

    Covariates are drawn from the standard normal law and labelled case with
    probability ``phi(alpha + beta'x)``; the first ``n1`` cases and ``n0``
    controls are kept.  Rows are returned cases first.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    d = beta.size
    if n1 < 1 or n0 < 1:
        raise ValueError("n1 and n0 must be positive")
    cases, controls = [], []
    have1 = have0 = 0
    draws = 0
    batch = max(1024, 2 * (n1 + n0))
    while have1 < n1 or have0 < n0:
        if draws >= max_draws:
            starved = "case" if have1 < n1 else "control"
            raise SamplingError(
                f"study {study_id}: {starved} pool not filled after {draws} draws "
                f"({have1}/{n1} cases, {have0}/{n0} controls)"
            )
        m = min(batch, max_draws - draws)
        x = rng.standard_normal((m, d))
        u = rng.random(m)
        is_case = u < expit(alpha + x @ beta)
        draws += m
        if have1 < n1:
            take = x[is_case][: n1 - have1]
            cases.append(take)
            have1 += take.shape[0]
        if have0 < n0:
            take = x[~is_case][: n0 - have0]
            controls.append(take)
            have0 += take.shape[0]
        batch = min(batch * 2, 10**6)
    x = np.vstack(cases + controls)
    y = np.concatenate([np.ones(n1), np.zeros(n0)])
    return StudyData(y=y, x=x, study_id=study_id)


def simulate_data(s: Scenario, r: int, seed: int | None = None) -> PooledData:
    """The pooled data of replication ``r`` (0-based) of scenario ``s``."""
    rng = np.random.default_rng([s.seed if seed is None else seed, r])
    studies = [
        sample_study(s.alphas[k], s.betas[k], s.n1[k], s.n0[k], rng, study_id=k + 1)
        for k in range(s.K)
    ]
    return PooledData(tuple(studies))


# --------------------------------------------------------------------------
# replications
# --------------------------------------------------------------------------


@dataclass
class _Replicate:
    """Estimates of one replication in table row order."""

    estimates: dict[str, np.ndarray | None]
    ese: dict[str, np.ndarray | None]
    rates: dict[str, np.ndarray | None]
    unidentified: np.ndarray | None
    errors: dict[str, str]
    ridge: bool = False


def _row_order(K: int, d: int) -> np.ndarray:
    # vector order (alphas, betas) -> table order (alpha_1, beta_1.., alpha_2, beta_2..)
    order = []
    for k in range(K):
        order.append(k)
        order.extend(K + k * d + j for j in range(d))
    return np.array(order)


def _one_replication(args) -> _Replicate:
    s, r, estimators, opts = args
    data = simulate_data(s, r)
    K, d = s.K, s.d
    order = _row_order(K, d)
    out = _Replicate({}, {}, {}, None, {})
    for est in estimators:
        out.estimates[est] = out.ese[est] = out.rates[est] = None
        if est == "combined":
            res = fit(data, opts)
            # a fit stopped on a flat ridge has reached the supremum of the
            # likelihood; it is kept and counted separately
            if res.status not in ("converged", "ridge"):
                out.errors[est] = res.message or "not converged"
                continue
            out.ridge = res.status == "ridge"
            out.estimates[est] = res.estimates[order]
            out.ese[est] = res.ese[order]
            out.rates[est] = np.asarray(res.c_hat, dtype=float)
            out.unidentified = np.array(
                [st.status == "not-identifiable" for st in res.flags.intercepts]
            )
            continue
        fitter = prospective_fit if est == "prospective" else known_density_fit
        try:
            fits = [fitter(study) for study in data.studies]
        except BaselineError as err:
            out.errors[est] = str(err)
            continue
        out.estimates[est] = np.concatenate([f.estimates for f in fits])
        out.ese[est] = np.concatenate([f.ese for f in fits])
    return out


@dataclass(frozen=True)
class MetricRow:
    name: str
    true: float
    bias: float
    se: float
    ese: float
    cp: float
    marker: str = ""


@dataclass(frozen=True)
class MetricsTable:
    scenario: str
    estimator: str
    reps: int
    n_used: int
    rows: tuple[MetricRow, ...]
    rate_rows: tuple[MetricRow, ...] = ()
    failures: tuple[tuple[int, str], ...] = field(default=())
    ridge: tuple[int, ...] = field(default=())

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def row(self, name: str) -> MetricRow:
        for r in self.rows + self.rate_rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _labels(K: int, d: int) -> list[str]:
    names = []
    for k in range(1, K + 1):
        names.append(f"alpha_{k}")
        names.extend(f"beta_{k}" if d == 1 else f"beta_{k}{j}" for j in range(1, d + 1))
    return names


def _sd(a: np.ndarray) -> np.ndarray:
    if a.shape[0] < 2:
        return np.full(a.shape[1:], np.nan)
    return np.std(a, axis=0, ddof=1)


def _aggregate(s: Scenario, est: str, reps: list[_Replicate]) -> MetricsTable:
    K, d = s.K, s.d
    truth = s.true_theta()[_row_order(K, d)]
    names = _labels(K, d)
    used = [r for r in reps if r.estimates[est] is not None]
    failures = tuple((i, r.errors[est]) for i, r in enumerate(reps) if r.estimates[est] is None)
    n = len(used)
    if n == 0:
        rows = tuple(MetricRow(nm, float(t), np.nan, np.nan, np.nan, np.nan) for nm, t in zip(names, truth))
        return MetricsTable(s.name, est, len(reps), 0, rows, (), failures)
    ridge = tuple(i for i, r in enumerate(reps) if est == "combined" and r.ridge and r.estimates[est] is not None)
    E = np.array([r.estimates[est] for r in used])
    S = np.array([r.ese[est] for r in used])
    S = np.where(np.isfinite(S), S, np.inf)
    bias = E.mean(axis=0) - truth
    se = _sd(E)
    with np.errstate(invalid="ignore"):
        mean_ese = S.mean(axis=0)
        cover = np.abs(E - truth) <= _Z95 * S
    cp = cover.mean(axis=0)
    markers = ["*" if not (m <= ESE_OVERFLOW) else "" for m in mean_ese]
    if est == "combined":
        flagged = np.array([r.unidentified for r in used]).mean(axis=0)
        for k in range(K):
            if flagged[k] > 0.5:
                i = names.index(f"alpha_{k + 1}")
                markers[i] += "u"
    rows = tuple(
        MetricRow(nm, float(t), float(b), float(v), float(m), float(c), mk)
        for nm, t, b, v, m, c, mk in zip(names, truth, bias, se, mean_ese, cp, markers)
    )
    rate_rows = ()
    if est == "combined":
        true_rates = np.array([true_case_rate(a, b) for a, b in zip(s.alphas, s.betas)])
        R = np.array([r.rates[est] for r in used])
        rb = R.mean(axis=0) - true_rates
        rs = _sd(R)
        rate_rows = tuple(
            MetricRow(f"p_{k + 1}", float(true_rates[k]), float(rb[k]), float(rs[k]), np.nan, np.nan)
            for k in range(K)
        )
    return MetricsTable(s.name, est, len(reps), n, rows, rate_rows, failures, ridge)


def _normalize_estimators(estimators) -> tuple[str, ...]:
    out = []
    for e in estimators:
        e = _ALIASES.get(e.strip(), e.strip())
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
        if e not in out:
            out.append(e)
    return tuple(out)


def run_scenario(
    s: Scenario,
    estimators=("combined",),
    reps: int | None = None,
    seed: int | None = None,
    workers: int = 1,
    opts: FitOptions | None = None,
) -> dict[str, MetricsTable]:
    """Replicate scenario ``s`` and summarize each estimator.

    Replications whose fit fails are listed in ``MetricsTable.failures`` and
    excluded from the metrics.  The output is identical for any ``workers``.
    """
    if reps is not None or seed is not None:
        s = s.replace(reps=s.reps if reps is None else reps, seed=s.seed if seed is None else seed)
    estimators = _normalize_estimators(estimators)
    if workers < 1:
        raise ValueError("workers must be at least 1")
    opts = opts or FitOptions()
    jobs = [(s, r, estimators, opts) for r in range(s.reps)]
    if workers == 1:
        results = [_one_replication(j) for j in jobs]
    else:
        chunk = max(1, math.ceil(len(jobs) / (4 * workers)))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, jobs, chunksize=chunk))
    return {est: _aggregate(s, est, results) for est in estimators}


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

_DISPLAY = {"combined": "combined", "prospective": "prospective (unknown f)", "known_density": "known f"}


def _fmt(v: float, kind: str = "num") -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if kind == "ese" and not v <= ESE_OVERFLOW:
        return "*"
    return f"{v:.4f}"


def _cells(r: MetricRow, rate: bool) -> list[str]:
    if rate:
        return [_fmt(r.bias), _fmt(r.se), "", ""]
    return [_fmt(r.bias), _fmt(r.se), _fmt(r.ese, "ese"), _fmt(r.cp)]


def format_tables(tables: dict[str, MetricsTable]) -> str:
    """Side-by-side blocks of Bias, SE, ESE and CP, one block per estimator."""
    tabs = list(tables.values())
    first = tabs[0]
    head1 = ["", ""]
    head2 = ["Par.", "True"]
    for t in tabs:
        head1 += [_DISPLAY[t.estimator], "", "", ""]
        head2 += ["Bias", "SE", "ESE", "CP"]
    lines = [head1, head2]
    for i, r in enumerate(first.rows):
        line = [r.name + (f" [{r.marker}]" if r.marker else ""), f"{r.true:.4g}"]
        for t in tabs:
            line += _cells(t.rows[i], False)
        lines.append(line)
    for i, r in enumerate(first.rate_rows):
        line = [r.name, f"{r.true:.3f}"]
        for t in tabs:
            line += _cells(t.rate_rows[i], True) if t.rate_rows else ["", "", "", ""]
        lines.append(line)
    widths = [max(len(l[j]) for l in lines if j < len(l)) for j in range(len(head2))]
    out = [f"scenario {first.scenario}: {first.reps} replications"]
    for t in tabs:
        extra = f" ({len(t.ridge)} stopped on a flat likelihood ridge)" if t.ridge else ""
        out.append(f"  {_DISPLAY[t.estimator]}: {t.n_used} used{extra}, {t.n_failed} failed")
    out.append("")
    for l in lines:
        out.append("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(l, widths))).rstrip())
    out.append("")
    out.append("* : mean ESE greater than 1e4;  u : intercept flagged not identifiable in most replications")
    return "\n".join(out)


def tables_to_tsv(tables: dict[str, MetricsTable]) -> str:
    cols = ["scenario", "estimator", "parameter", "true", "bias", "se", "ese", "cp", "marker", "used", "failed"]
    lines = ["\t".join(cols)]
    for t in tables.values():
        for r in t.rows + t.rate_rows:
            rate = r.name.startswith("p_")
            vals = [
                t.scenario, t.estimator, r.name, f"{r.true:.4f}",
                _fmt(r.bias), _fmt(r.se),
                "" if rate else _fmt(r.ese, "ese"),
                "" if rate else _fmt(r.cp),
                r.marker, str(t.n_used), str(t.n_failed),
            ]
            lines.append("\t".join(vals))
    return "\n".join(lines) + "\n"


def _json_num(v: float):
    if v is None or math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def tables_to_json(tables: dict[str, MetricsTable]) -> str:
    doc = {}
    for est, t in tables.items():
        doc[est] = {
            "scenario": t.scenario,
            "reps": t.reps,
            "used": t.n_used,
            "ridge": list(t.ridge),
            "failures": [{"replication": i, "message": m} for i, m in t.failures],
            "rows": [
                {
                    "parameter": r.name,
                    "true": r.true,
                    "bias": _json_num(r.bias),
                    "se": _json_num(r.se),
                    "ese": _json_num(r.ese),
                    "cp": _json_num(r.cp),
                    "marker": r.marker,
                }
                for r in t.rows + t.rate_rows
            ],
        }
    return json.dumps(doc, indent=2)
