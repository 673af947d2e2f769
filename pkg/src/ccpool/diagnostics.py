"""Identifiability checks for the intercepts of a pooled fit.

Slopes are always identified.  Intercepts are identified through the
covariate distribution, which pooling pins down only when the studies
differ.  The rules applied, each named by the ``clause`` string in the
report:

``single-study``
    ``K = 1``: the intercept is confounded with the sampling fractions.
``zero-slope``
    a study whose slope is zero carries no information about its intercept.
``equal-models``
    all slopes and all intercepts equal: pooling is a split of one study.
``distinct-models``
    nonzero slope and the studies differ (in slope or in intercept).

Exact zeros and exact equalities are not observable, so each is replaced by
a Wald test at level ``level``; a slope that is significant at ``level`` but
not at ``strict_level`` marks its intercept ``suspect``.  Coordinates with
infinite estimated variance are reported ``not-identifiable`` with clause
``singular-information``.

One rule has two readings.  When slopes are not all equal, intercepts with a
nonzero slope can be taken as identified (the score of the intercept leaves
the span of the nuisance scores) or, literally, as not identified.  The
first reading is applied; ``notes`` records the alternative whenever it
would change a status.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats

__all__ = ["IdentifiabilityReport", "InterceptStatus", "identifiability_report"]


@dataclass(frozen=True)
class InterceptStatus:
    study: int
    status: str  # "identifiable" | "not-identifiable" | "suspect"
    clause: str
    reason: str


@dataclass(frozen=True)
class IdentifiabilityReport:
    slope_zero: tuple[bool, ...]
    slope_pvalues: tuple[tuple[float, ...], ...]
    slopes_equal: dict[tuple[int, int], bool]
    intercepts_equal: bool
    intercepts: tuple[InterceptStatus, ...]
    level: float
    notes: tuple[str, ...] = field(default=())

    @property
    def degenerate(self) -> bool:
        """True if any intercept is not identifiable."""
        return any(s.status == "not-identifiable" for s in self.intercepts)

    def format(self) -> str:
        lines = [f"identifiability (Wald tests at level {self.level:g})"]
        for k, (z, pv) in enumerate(zip(self.slope_zero, self.slope_pvalues), start=1):
            pstr = ", ".join(f"{v:.4g}" for v in pv)
            lines.append(f"  study {k}: slope zero: {'yes' if z else 'no'} (p = {pstr})")
        for (k, l), eq in sorted(self.slopes_equal.items()):
            lines.append(f"  slopes {k} and {l} equal: {'yes' if eq else 'no'}")
        if len(self.intercepts) > 1:
            lines.append(f"  intercepts all equal: {'yes' if self.intercepts_equal else 'no'}")
        for s in self.intercepts:
            lines.append(f"  alpha_{s.study}: {s.status} [{s.clause}] {s.reason}")
        lines.extend(f"  note: {n}" for n in self.notes)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "slope_zero": list(self.slope_zero),
            "slope_pvalues": [list(p) for p in self.slope_pvalues],
            "slopes_equal": {f"{k},{l}": v for (k, l), v in self.slopes_equal.items()},
            "intercepts_equal": self.intercepts_equal,
            "intercepts": [
                {"study": s.study, "status": s.status, "clause": s.clause, "reason": s.reason}
                for s in self.intercepts
            ],
            "notes": list(self.notes),
        }


def _wald_pvalue(diff: np.ndarray, cov: np.ndarray) -> float:
    """p-value of the Wald chi-square test of ``diff == 0``; nan if the covariance is unusable."""
    if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(diff)):
        return float("nan")
    try:
        stat = float(diff @ np.linalg.solve(cov, diff))
    except np.linalg.LinAlgError:
        return float("nan")
    if not np.isfinite(stat) or stat < 0:
        return float("nan")
    return float(stats.chi2.sf(stat, df=diff.size))


def identifiability_report(
    theta,
    cov: np.ndarray,
    K: int,
    d: int,
    level: float = 0.05,
    strict_level: float = 1e-3,
) -> IdentifiabilityReport:
    """Apply the identifiability rules to a fitted parameter vector and its covariance.

    Parameters
    ----------
    theta : Theta or array_like
        Estimates in vectorized order ``(alpha_1..alpha_K, beta_1..beta_K)``.
    cov : ndarray
        Their covariance; ``inf`` diagonal entries mark unidentified coordinates.
    level : float
        Significance level for the zero-slope and equality tests.
    strict_level : float
        A slope significant at ``level`` but not here makes its intercept ``suspect``.
    """
    v = theta.to_vector() if hasattr(theta, "to_vector") else np.asarray(theta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if not 0 < strict_level <= level < 1:
        raise ValueError("need 0 < strict_level <= level < 1")
    alphas = v[:K]
    betas = v[K:].reshape(K, d)
    var = np.diag(cov)

    def bidx(k):
        return K + k * d + np.arange(d)

    pvals, zero, weak, slope_unknown = [], [], [], []
    for k in range(K):
        idx = bidx(k)
        se = np.sqrt(var[idx])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(betas[k]) / se
        pv = np.where(np.isfinite(se) & (se > 0), 2 * stats.norm.sf(z), np.nan)
        pvals.append(tuple(float(p) for p in pv))
        unknown = bool(np.any(np.isnan(pv)))
        slope_unknown.append(unknown)
        zero.append(not unknown and bool(np.all(pv >= level)))
        weak.append(not unknown and not zero[-1] and bool(np.all(pv >= strict_level)))

    slopes_equal = {}
    for k, l in combinations(range(K), 2):
        ik, il = bidx(k), bidx(l)
        c = cov[np.ix_(ik, ik)] + cov[np.ix_(il, il)] - cov[np.ix_(ik, il)] - cov[np.ix_(il, ik)]
        p = _wald_pvalue(betas[k] - betas[l], c)
        slopes_equal[(k + 1, l + 1)] = bool(np.isnan(p) or p >= level)

    if K > 1:
        # joint test of alpha_1 = ... = alpha_K
        C = np.zeros((K - 1, K))
        C[:, 0] = 1.0
        C[np.arange(K - 1), np.arange(1, K)] = -1.0
        p = _wald_pvalue(C @ alphas, C @ cov[:K, :K] @ C.T)
        intercepts_equal = bool(np.isnan(p) or p >= level)
    else:
        intercepts_equal = True
    all_slopes_equal = all(slopes_equal.values())

    statuses, notes = [], []
    for k in range(K):
        if K == 1:
            st = InterceptStatus(
                1, "not-identifiable", "single-study",
                "one study alone cannot separate the intercept from the sampling fractions",
            )
        elif zero[k]:
            st = InterceptStatus(
                k + 1, "not-identifiable", "zero-slope",
                "slope not distinguishable from zero",
            )
        elif all_slopes_equal and intercepts_equal:
            st = InterceptStatus(
                k + 1, "not-identifiable", "equal-models",
                "all slopes and all intercepts indistinguishable",
            )
        elif not np.isfinite(var[k]) or not np.isfinite(var[bidx(k)]).all():
            st = InterceptStatus(
                k + 1, "not-identifiable", "singular-information",
                "information matrix is singular along this coordinate",
            )
        elif weak[k] or slope_unknown[k]:
            st = InterceptStatus(
                k + 1, "suspect", "zero-slope",
                f"slope significant at {level:g} but not at {strict_level:g}",
            )
        else:
            st = InterceptStatus(
                k + 1, "identifiable", "distinct-models",
                "nonzero slope and the studies differ",
            )
        statuses.append(st)

    alt = [f"alpha_{s.study}" for s in statuses if s.status == "identifiable"]
    if alt and not all_slopes_equal:
        notes.append(
            f"{', '.join(alt)}: a literal reading of the distinct-slopes rule would report "
            "intercepts with nonzero slope as not identifiable too"
        )

    return IdentifiabilityReport(
        slope_zero=tuple(zero),
        slope_pvalues=tuple(pvals),
        slopes_equal=slopes_equal,
        intercepts_equal=intercepts_equal,
        intercepts=tuple(statuses),
        level=level,
        notes=tuple(notes),
    )
