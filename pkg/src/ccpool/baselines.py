"""Single-study comparison estimators.

``prospective_fit`` is ordinary logistic regression applied to the
case-control sample as if it were a random sample.  Its slopes are
consistent; its intercept is shifted by
``log(n1 / n0) - log(c / (1 - c))``, where ``c`` is the population case rate.

``known_density_fit`` maximizes the retrospective likelihood

    sum_i [y_i log(phi_i / c) + (1 - y_i) log((1 - phi_i) / (1 - c))]

with ``c = E[phi(alpha + beta'X)]`` computed under a known covariate law.
Standard errors of both come from the observed information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from ._optim import newton_ascent
from .density import QuadratureError, StandardNormalDensity
from .model import StudyData

__all__ = [
    "BaselineFit",
    "BaselineError",
    "prospective_fit",
    "known_density_fit",
    "prospective_intercept_offset",
    "odds_ratios",
]


class BaselineError(RuntimeError):
    """A baseline fit failed (separation, non-convergence or quadrature failure)."""


@dataclass(frozen=True)
class BaselineFit:
    alpha: float
    beta: np.ndarray
    covariance: np.ndarray
    ese: np.ndarray  # (alpha, beta_1..beta_d)
    method: str  # "prospective" | "known_density"
    loglik: float
    iterations: int
    converged: bool

    @property
    def estimates(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta])


def _design(study: StudyData) -> np.ndarray:
    return np.column_stack([np.ones(study.n), study.x])


def _finish(study, res, H, method) -> BaselineFit:
    info = -H
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as err:
        raise BaselineError(f"study {study.study_id}: singular information ({method})") from err
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
        raise BaselineError(f"study {study.study_id}: information not positive definite ({method})")
    return BaselineFit(
        alpha=float(res.x[0]),
        beta=res.x[1:].copy(),
        covariance=cov,
        ese=np.sqrt(diag),
        method=method,
        loglik=float(res.value),
        iterations=res.iterations,
        converged=True,
    )


def prospective_fit(study: StudyData, tol: float = 1e-8, max_iter: int = 100) -> BaselineFit:
    """Logistic MLE of ``y`` on ``x`` ignoring the case-control design.

    Raises
    ------
    BaselineError
        Under complete separation or if Newton's method does not converge.
    """
    Z = _design(study)
    y = study.y

    def fun(v):
        eta = Z @ v
        return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))

    def grad_hess(v):
        phi = expit(Z @ v)
        return Z.T @ (y - phi), -(Z.T * (phi * (1 - phi))) @ Z

    def guard(v):
        if np.max(np.abs(y - expit(Z @ v))) < 1e-8:
            raise BaselineError(f"study {study.study_id}: complete separation")

    v0 = np.zeros(Z.shape[1])
    v0[0] = np.log(study.n1 / study.n0)
    res = newton_ascent(fun, grad_hess, v0, tol=tol, max_iter=max_iter, guard=guard)
    if not res.converged:
        raise BaselineError(
            f"study {study.study_id}: logistic fit did not converge ({res.status}, "
            f"max|score| = {res.grad_norm:.3g}); the study may be separated"
        )
    return _finish(study, res, grad_hess(res.x)[1], "prospective")


def prospective_intercept_offset(n1: int, n0: int, case_rate: float) -> float:
    """Limit of the prospective intercept minus the true intercept."""
    return float(np.log(n1 / n0) - np.log(case_rate / (1 - case_rate)))


def known_density_fit(
    study: StudyData,
    f: StandardNormalDensity | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    init=None,
) -> BaselineFit:
    """Retrospective MLE with the covariate density known.

    ``f`` defaults to the standard normal law in the study's dimension.  The
    starting point is the prospective fit with its intercept moved by the
    sampling offset implied by the starting case rate.
    """
    f = f or StandardNormalDensity(d=study.d)
    if f.d != study.d:
        raise ValueError(f"density has dimension {f.d}, study has {study.d}")
    Z = _design(study)
    y = study.y
    n1, n0 = study.n1, study.n0

    def fun(v):
        eta = Z @ v
        try:
            c = f.case_rate(v[0], v[1:])
        except QuadratureError as err:
            raise ValueError(str(err)) from err
        if not 0 < c < 1:
            return -np.inf
        return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)) - n1 * np.log(c) - n0 * np.log1p(-c))

    def grad_hess(v):
        phi = expit(Z @ v)
        m = f.linear_moments(v[0], v[1:])
        c = m.c
        a = n1 / c - n0 / (1 - c)
        b = n1 / c**2 + n0 / (1 - c) ** 2
        g = Z.T @ (y - phi) - a * m.grad
        H = -(Z.T * (phi * (1 - phi))) @ Z - a * m.hess + b * np.outer(m.grad, m.grad)
        return g, H

    def guard(v):
        if np.max(np.abs(y - expit(Z @ v))) < 1e-8:
            raise BaselineError(f"study {study.study_id}: complete separation")

    try:
        if init is None:
            v0 = prospective_fit(study).estimates
            c0 = f.case_rate(v0[0], v0[1:])
            v0[0] -= np.log(n1 / n0) - np.log(c0 / (1 - c0))
        else:
            v0 = np.asarray(init, dtype=float).copy()
        res = newton_ascent(fun, grad_hess, v0, tol=tol, max_iter=max_iter, guard=guard)
        H = grad_hess(res.x)[1]
    except QuadratureError as err:
        raise BaselineError(f"study {study.study_id}: {err}") from err
    if not res.converged:
        raise BaselineError(
            f"study {study.study_id}: known-density fit did not converge "
            f"({res.status}, max|score| = {res.grad_norm:.3g})"
        )
    return _finish(study, res, H, "known_density")


def odds_ratios(estimates, ese, z: float = 1.959963984540054) -> np.ndarray:
    """Odds ratios ``exp(beta)`` with Wald limits, one row per slope: (OR, lower, upper)."""
    b = np.asarray(estimates, dtype=float)
    s = np.asarray(ese, dtype=float)
    return np.column_stack([np.exp(b), np.exp(b - z * s), np.exp(b + z * s)])
