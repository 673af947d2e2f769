"""Profile maximum likelihood for pooled case-control studies.

:func:`fit` alternates two steps until both the parameters and the jump
masses stop moving:

1. with the masses fixed, move ``theta`` uphill on :func:`~ccpool.model.profile_loglik`
   (damped Newton, exact derivatives);
2. with ``theta`` fixed, replace every mass by the closed-form update
   ``1 / sum_t [n_t1 phi_t / c_t + n_t0 (1 - phi_t) / (1 - c_t)]``.

Step 2 is a minorize-maximize step for the likelihood written with
``1 - c_t = sum (1 - phi_t) p``, which is invariant to rescaling ``p``; the
masses are renormalized after each update so that the recorded likelihood
trace is that of the constrained problem and is non-decreasing.

The covariance of ``theta`` is the parameter block of the inverse negative
Hessian in ``(theta, p)``.  The mass block is identity-plus-low-rank after
rescaling by ``diag(p)``, so the Schur complement costs ``O(N r^2)`` with
``r = n_params + 2K + 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import expit, logsumexp

from . import model
from ._optim import newton_ascent
from .model import DegenerateMassError, PooledData, Theta

log = logging.getLogger(__name__)

__all__ = [
    "FitOptions",
    "FitResult",
    "ThetaSolveError",
    "update_masses",
    "solve_theta",
    "fit",
    "covariance_estimate",
    "ESE_OVERFLOW",
]

#: ESEs above this are reported with the ``*`` marker.
ESE_OVERFLOW = 1e4

_TINY_RCOND = 1e-12


class ThetaSolveError(RuntimeError):
    """The parameter update did not reach a stationary point.

    Attributes
    ----------
    theta : Theta
        Best iterate found.
    grad_norm : float
        Max-abs score at ``theta``.
    """

    def __init__(self, message: str, theta: Theta, grad_norm: float):
        super().__init__(message)
        self.theta = theta
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class FitOptions:
    """Tolerances and modes for :func:`fit`.

    ``theta_tol`` and ``mass_tol`` bound the max-abs change of ``theta`` and
    ``p`` between outer iterations.  ``inner_solver_tol`` bounds the max-abs
    score when the parameter update is declared stationary; scores of sums
    over ``N`` observations carry rounding error near ``N * 1e-16``, so values
    far below ``1e-9`` are not attainable for ``N`` in the hundreds.

    ``trust_radius`` caps how far one parameter update may move any
    coordinate.  Far from the optimum the fixed-mass objective can increase
    towards an asymptote at infinity; the cap keeps the alternation in the
    region where the mass update can correct it.

    ``accelerate`` applies SQUAREM extrapolation to the mass fixed-point map,
    keeping only extrapolations that do not lower the likelihood.
    """

    theta_tol: float = 1e-10
    mass_tol: float = 1e-10
    max_outer_iters: int = 5000
    inner_solver_tol: float = 1e-8
    inner_max_iters: int = 100
    trust_radius: float = 1.0
    hessian_mode: Literal["analytic", "fd"] = "analytic"
    constraint: Literal["bordered", "free"] = "bordered"
    accelerate: bool = True

    def __post_init__(self) -> None:
        for name in ("theta_tol", "mass_tol", "inner_solver_tol", "trust_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_outer_iters < 1 or self.inner_max_iters < 1:
            raise ValueError("iteration budgets must be at least 1")
        if self.hessian_mode not in ("analytic", "fd"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")
        if self.constraint not in ("bordered", "free"):
            raise ValueError(f"unknown constraint {self.constraint!r}")

    @classmethod
    def sample_size_rule(cls, n: int, **kwargs) -> "FitOptions":
        """Stopping tolerances ``n**-6``, clamped below at ``1e-12``."""
        kappa = max(float(n) ** -6, 1e-12)
        return cls(theta_tol=kappa, mass_tol=kappa, **kwargs)


@dataclass(frozen=True)
class FitResult:
    theta_hat: Theta
    p_hat: np.ndarray
    c_hat: np.ndarray
    covariance: np.ndarray
    ese: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    trace: tuple[float, ...]
    flags: "object | None" = None
    labels: tuple[str, ...] = ()
    index: np.ndarray | None = field(default=None, repr=False)
    score_norm: float = float("nan")
    message: str = ""
    # "converged" | "ridge" (likelihood flat, parameters drifting) | "budget" | "failed"
    status: str = "converged"

    @property
    def estimates(self) -> np.ndarray:
        return self.theta_hat.to_vector()

    def confidence_intervals(self, level_z: float = 1.959963984540054) -> np.ndarray:
        """Wald intervals ``estimate +/- z * ESE`` as an (n_params, 2) array."""
        est = self.estimates
        return np.column_stack([est - level_z * self.ese, est + level_z * self.ese])

    def cdf(self, x, data: PooledData) -> float:
        """Estimated covariate distribution function ``sum_{x_i <= x} p_i`` (componentwise)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mask = np.all(data.x <= x[None, :], axis=1)
        return float(self.p_hat[mask].sum())


# --------------------------------------------------------------------------
# the two steps
# --------------------------------------------------------------------------


def _mass_update(v: np.ndarray, p: np.ndarray, data: PooledData) -> np.ndarray:
    eta = model.linear_predictors(v, data)
    phi = expit(eta)
    logp = np.log(p)[:, None]
    log_c1 = logsumexp(model.log_logistic(eta) + logp, axis=0)
    log_c0 = logsumexp(model.log_logistic(-eta) + logp, axis=0)
    # n1 phi / c + n0 (1 - phi) / (1 - c), with the ratios formed in log space;
    # 1 - phi as expit(-eta) since n0 / (1 - c) is huge when c is near one
    den = np.exp(np.log(data.n1) - log_c1) * phi + np.exp(np.log(data.n0) - log_c0) * expit(-eta)
    den = den.sum(axis=1)
    if not np.all(np.isfinite(den)) or np.any(den <= 0):
        raise DegenerateMassError("mass update denominator is not positive and finite")
    return 1.0 / den


def update_masses(theta, p, data: PooledData) -> np.ndarray:
    """One closed-form mass update.

    Returns ``1 / sum_t [n_t1 phi_t(x_i) / c_t + n_t0 (1 - phi_t(x_i)) / (1 - c_t)]``
    with ``c_t`` the case rates at ``(theta, p)``.  The result is not
    renormalized; at a fixed point it sums to one.
    """
    v = model._theta_vector(theta, data)
    p = model.check_masses(p, data, tol=1e-6)
    return _mass_update(v, p, data)


def _ascend(v, p, data, tol, max_iter, radius=None, guard=None):
    return newton_ascent(
        lambda u: model._loglik(u, p, data, literal=False),
        lambda u: (model._grad(u, p, data), model._hess(u, p, data)),
        v,
        tol=tol,
        max_iter=max_iter,
        radius=radius,
        guard=guard,
    )


def _separation_guard(data: PooledData):
    own = np.arange(data.N)

    def guard(v):
        phi = expit(model.linear_predictors(v, data)[own, data.study])
        resid = np.abs(data.y - phi)
        for k in range(data.K):
            if np.max(resid[data.study == k]) < 1e-8:
                raise ThetaSolveError(
                    f"study {k + 1}: fitted probabilities reproduce the responses "
                    "(complete separation)",
                    Theta.from_vector(v, data.K, data.d),
                    float("nan"),
                )

    return guard


def solve_theta(p, data: PooledData, init=None, tol: float = 1e-8, max_iter: int = 200) -> Theta:
    """Maximize the profile log-likelihood over ``theta`` with the masses held fixed.

    Raises
    ------
    ThetaSolveError
        If the score is not driven below ``tol`` within ``max_iter`` Newton
        steps, or the iterates separate a study perfectly.
    """
    p = model.check_masses(p, data)
    v0 = np.zeros(data.n_params) if init is None else model._theta_vector(init, data)
    guard = _separation_guard(data)
    try:
        res = _ascend(v0, p, data, tol, max_iter, guard=guard)
    except ThetaSolveError as err:
        err.grad_norm = float(np.max(np.abs(model._grad(err.theta.to_vector(), p, data))))
        raise
    theta = Theta.from_vector(res.x, data.K, data.d)
    if not res.converged:
        raise ThetaSolveError(
            f"parameter update stopped ({res.status}) with max|score| = {res.grad_norm:.3g}",
            theta,
            res.grad_norm,
        )
    return theta


# --------------------------------------------------------------------------
# outer iteration
# --------------------------------------------------------------------------


def initial_theta(data: PooledData) -> Theta:
    """Per-study prospective logistic fits; a study that fails to fit starts at zero."""
    from .baselines import BaselineError, prospective_fit

    alphas = np.zeros(data.K)
    betas = np.zeros((data.K, data.d))
    for k, study in enumerate(data.studies):
        try:
            bf = prospective_fit(study)
        except BaselineError:
            continue
        alphas[k] = bf.alpha
        betas[k] = bf.beta
    return Theta(alphas, betas)


class _Stepper:
    """The map ``p -> (theta*(p), p')`` with warm-started parameter updates."""

    def __init__(self, data: PooledData, opts: FitOptions):
        self.data = data
        self.opts = opts
        self.calls = 0

    def __call__(self, v, p):
        self.calls += 1
        o = self.opts
        res = _ascend(v, p, self.data, o.inner_solver_tol, o.inner_max_iters, radius=o.trust_radius)
        p_new = _mass_update(res.x, p, self.data)
        p_new /= p_new.sum()
        return res.x, p_new, res.converged

    def loglik(self, v, p) -> float:
        return model._loglik(v, p, self.data, literal=False)


def _small(a, b, tol) -> bool:
    return float(np.max(np.abs(a - b))) <= tol


_RIDGE_WINDOW = 50
_RIDGE_RATE = 1e-13
_RIDGE_TRAVEL = 1e-4


def _on_ridge(trace, path) -> bool:
    """Likelihood gain over the last window is at rounding level while theta keeps travelling.

    The travel condition separates a ridge from slow linear convergence near
    a maximum, where the gain is also at rounding level but the steps shrink.
    """
    if len(trace) <= _RIDGE_WINDOW or len(path) <= _RIDGE_WINDOW:
        return False
    gain = trace[-1] - trace[-1 - _RIDGE_WINDOW]
    if gain > _RIDGE_WINDOW * _RIDGE_RATE * (1.0 + abs(trace[-1])):
        return False
    return float(np.max(np.abs(path[-1] - path[-1 - _RIDGE_WINDOW]))) >= _RIDGE_TRAVEL


def _iterate_plain(step: _Stepper, v, p, opts: FitOptions):
    trace = [step.loglik(v, p)]
    path = [v]
    for j in range(1, opts.max_outer_iters + 1):
        v1, p1, ok = step(v, p)
        dv, dp = _small(v1, v, opts.theta_tol), _small(p1, p, opts.mass_tol)
        v, p = v1, p1
        trace.append(step.loglik(v, p))
        path.append(v)
        if ok and dv and dp:
            return v, p, j, "converged", trace
        if _on_ridge(trace, path):
            return v, p, j, "ridge", trace
    return v, p, opts.max_outer_iters, "budget", trace


def _iterate_squarem(step: _Stepper, v, p, opts: FitOptions):
    # Varadhan & Roland (2008), scheme S3 on log-masses with a monotone safeguard
    v, p, _ = step(v, p)
    L = step.loglik(v, p)
    trace = [L]
    path = [v]
    for j in range(1, opts.max_outer_iters + 1):
        v1, p1, ok1 = step(v, p)
        if ok1 and _small(v1, v, opts.theta_tol) and _small(p1, p, opts.mass_tol):
            trace.append(step.loglik(v1, p1))
            return v1, p1, j, "converged", trace
        v2, p2, _ = step(v1, p1)
        L2 = step.loglik(v2, p2)
        x0, x1, x2 = np.log(p), np.log(p1), np.log(p2)
        r = x1 - x0
        w = x2 - 2 * x1 + x0
        rr, ww = float(r @ r), float(w @ w)
        a = min(-np.sqrt(rr / ww), -1.0) if ww > 0 else -1.0
        best = (v2, p2, L2)
        while a < -1.0:
            xe = x0 - 2 * a * r + a * a * w
            pe = np.exp(xe - logsumexp(xe))
            try:
                ve, pe2, _ = step(v2, pe)
                Le = step.loglik(ve, pe2)
            except (DegenerateMassError, FloatingPointError):
                Le = -np.inf
            if np.isfinite(Le) and Le >= L2:
                best = (ve, pe2, Le)
                break
            a = (a - 1.0) / 2.0
            if a > -1.0 - 1e-12:
                break
        v, p, L = best
        trace.append(L)
        path.append(v)
        if _on_ridge(trace, path):
            return v, p, j, "ridge", trace
    return v, p, opts.max_outer_iters, "budget", trace


def fit(data: PooledData, opts: FitOptions | None = None, init=None) -> FitResult:
    """Fit all intercepts and slopes of the pooled studies.

    Parameters
    ----------
    data : PooledData
    opts : FitOptions, optional
    init : Theta, optional
        Starting parameters; default is :func:`initial_theta`.

    Returns
    -------
    FitResult
        ``converged`` is False when the iteration budget ran out or the final
        parameter update was not stationary; estimates are still attached.
    """
    from .diagnostics import identifiability_report

    opts = opts or FitOptions()
    v = (initial_theta(data) if init is None else init)
    v = model._theta_vector(v, data)
    p = np.full(data.N, 1.0 / data.N)
    step = _Stepper(data, opts)
    message = ""
    with np.errstate(over="ignore", under="ignore"):
        try:
            runner = _iterate_squarem if opts.accelerate else _iterate_plain
            v, p, iterations, status, trace = runner(step, v, p, opts)
        except DegenerateMassError as err:
            status, iterations, trace = "failed", step.calls, []
            message = f"degenerate masses: {err}"

        # final parameter update at the returned masses, so the score is evaluated at (theta, p)
        final = _ascend(v, p, data, opts.inner_solver_tol, opts.inner_max_iters, radius=opts.trust_radius)
        v = final.x
        if trace:
            trace.append(step.loglik(v, p))
        if status == "ridge":
            message = (
                "likelihood flat to rounding error while parameters still move "
                "(unbounded or unidentified direction)"
            )
        elif status == "budget":
            message = f"no convergence within {opts.max_outer_iters} outer iterations"
        if status == "converged" and not final.converged:
            status = "failed"
            message = f"final parameter update stopped ({final.status})"
    converged = status == "converged"

    theta = Theta.from_vector(v, data.K, data.d)
    score_norm = float(np.max(np.abs(model._grad(v, p, data))))
    try:
        loglik = model._loglik(v, p, data, literal=False)
        c_hat = np.exp(model._Terms(v, p, data).log_c1)
    except DegenerateMassError:
        loglik, c_hat = float("nan"), np.full(data.K, np.nan)

    try:
        cov = covariance_estimate(theta, p, data, mode=opts.hessian_mode, constraint=opts.constraint)
    except (np.linalg.LinAlgError, ValueError) as err:
        log.warning("covariance estimate failed: %s", err)
        cov = np.full((data.n_params, data.n_params), np.nan)
        np.fill_diagonal(cov, np.inf)
    ese = _standard_errors(cov)
    labels = tuple(model.parameter_labels(data.K, data.d))
    flags = identifiability_report(theta, cov, data.K, data.d) if data.K >= 1 else None
    if not converged:
        log.info("fit did not converge: %s", message)
    return FitResult(
        theta_hat=theta,
        p_hat=p,
        c_hat=c_hat,
        covariance=cov,
        ese=ese,
        loglik=loglik,
        iterations=iterations,
        converged=bool(converged),
        trace=tuple(trace),
        flags=flags,
        labels=labels,
        index=data.index,
        score_norm=score_norm,
        message=message,
        status=status,
    )


def _standard_errors(cov: np.ndarray) -> np.ndarray:
    diag = np.diag(cov).copy()
    ese = np.full(diag.shape, np.inf)
    ok = np.isfinite(diag) & (diag > 0)
    ese[ok] = np.sqrt(diag[ok])
    return ese


# --------------------------------------------------------------------------
# covariance
# --------------------------------------------------------------------------


def _woodbury_schur(M_tt, M_tp, U, C_diag):
    """``M_tt - M_tp (I + U diag(C) U')^{-1} M_tp'``, never forming the N x N block."""
    cap = np.diag(1.0 / C_diag) + U.T @ U
    MU = M_tp @ U
    S = M_tt - M_tp @ M_tp.T + MU @ np.linalg.solve(cap, MU.T)
    return 0.5 * (S + S.T)


def _schur_bordered(v, p, data):
    """Schur complement of the mass block for the likelihood restricted to sum(p) = 1.

    Works with the rescaling-invariant form of the likelihood, whose Hessian is
    singular along ``(0, p)``; adding the outer product of the constraint
    gradient removes that direction without changing the parameter block of
    the bordered inverse.  Masses are rescaled by ``diag(p)``.
    """
    K, d, N = data.K, data.d, data.N
    tm = model._Terms(v, p, data)
    Z = model._design(data)
    m = 1 + d
    Bt = np.zeros((K * m, N))
    for t in range(K):
        phi, r1, r0 = tm.phi[:, t], tm.r1[:, t], tm.r0[:, t]
        m1 = Z.T @ (r1 * (1 - phi))
        m0 = Z.T @ (r0 * phi)
        coef = -data.n1[t] * r1 * (1 - phi) + data.n0[t] * r0 * phi
        Bt[t * m:(t + 1) * m] = (
            Z.T * coef + np.outer(m1, data.n1[t] * r1) - np.outer(m0, data.n0[t] * r0)
        )
    Bt = Bt[model._perm(K, d)]
    A = model._hess(v, p, data, tm)
    U = np.hstack([tm.r1, tm.r0, p[:, None]])
    C = np.concatenate([-data.n1, -data.n0, [1.0]])
    return _woodbury_schur(-A, -Bt, U, C)


def _schur_free(v, p, data):
    """Schur complement with every mass free, from the Hessian of the likelihood as written."""
    A = model._hess(v, p, data)
    B, gamma, phi = model._cross_blocks(v, p, data)
    Bs = B * p[None, :]
    U = phi * p[:, None]
    return _woodbury_schur(-A, -Bs, U, -gamma)


def _literal_gradient(z, data, n_par):
    v, p = z[:n_par], z[n_par:]
    eta = model.linear_predictors(v, data)
    phi = expit(eta)
    c = p @ phi
    a = data.n1 / c - data.n0 / (1 - c)
    Z = model._design(data)
    resid = np.zeros((data.N, data.K))
    resid[np.arange(data.N), data.study] = data.y - phi[np.arange(data.N), data.study]
    G = Z.T @ (resid - (phi * (1 - phi) * p[:, None]) * a)
    gp = 1.0 / p - phi @ a
    return np.concatenate([model._to_theta_order(G), gp])


def _fd_hessian(v, p, data, max_n=3000):
    """Dense Hessian by central differences of the analytic gradient."""
    if data.N > max_n:
        raise ValueError(f"finite-difference Hessian is limited to N <= {max_n}")
    n_par = data.n_params
    z = np.concatenate([v, p])
    h = np.concatenate([1e-5 * np.maximum(1.0, np.abs(v)), 1e-5 * p])
    H = np.empty((z.size, z.size))
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h[j]
        H[:, j] = (_literal_gradient(z + e, data, n_par) - _literal_gradient(z - e, data, n_par)) / (
            2 * h[j]
        )
    return 0.5 * (H + H.T)


def _dense_theta_block(H, n_par, constraint):
    M = -H
    if constraint == "bordered":
        g = np.zeros((M.shape[0], 1))
        g[n_par:] = 1.0
        M = np.block([[M, g], [g.T, np.zeros((1, 1))]])
    return M


def _schur_dense(H, n_par, constraint):
    """Schur complement of the (possibly bordered) mass block of a dense Hessian."""
    M = _dense_theta_block(H, n_par, constraint)
    Mtt = M[:n_par, :n_par]
    Mtp = M[:n_par, n_par:]
    Mpp = M[n_par:, n_par:]
    S = Mtt - Mtp @ np.linalg.solve(Mpp, Mtp.T)
    return 0.5 * (S + S.T)


def _invert_with_flags(S):
    """Inverse of the Schur complement; coordinates in its (near) null space get infinite variance."""
    n = S.shape[0]
    evals, evecs = np.linalg.eigh(S)
    scale = float(np.max(np.abs(evals))) if evals.size else 0.0
    if scale == 0.0 or not np.all(np.isfinite(evals)):
        cov = np.full((n, n), np.nan)
        np.fill_diagonal(cov, np.inf)
        return cov
    null = np.abs(evals) <= _TINY_RCOND * scale
    keep = ~null
    cov = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    cov = 0.5 * (cov + cov.T)
    bad = np.zeros(n, dtype=bool)
    if np.any(null):
        bad |= np.sum(evecs[:, null] ** 2, axis=1) > 1e-8
    bad |= ~(np.diag(cov) > 0)
    if np.any(bad):
        cov[bad, :] = np.nan
        cov[:, bad] = np.nan
        cov[bad, bad] = np.inf
    return cov


def covariance_estimate(
    theta,
    p,
    data: PooledData,
    mode: Literal["analytic", "fd"] = "analytic",
    constraint: Literal["bordered", "free"] = "bordered",
) -> np.ndarray:
    """Covariance of the parameter estimates at a converged fit.

    The parameter block of the inverse negative Hessian of the profile
    log-likelihood in ``(theta, p)``.  ``constraint="bordered"`` imposes
    ``sum(p) = 1`` through a bordered Hessian; ``"free"`` differentiates the
    likelihood with every mass free.  ``mode="fd"`` replaces the analytic
    Hessian by central differences of the gradient (dense, small ``N`` only).

    Coordinates lying in the numerical null space of the Schur complement
    (reciprocal condition below ``1e-12``) get ``inf`` variance and ``nan``
    covariances; the remaining entries come from the pseudo-inverse.
    """
    v = model._theta_vector(theta, data)
    p = model.check_masses(p, data, tol=1e-8)
    if mode not in ("analytic", "fd"):
        raise ValueError(f"unknown mode {mode!r}")
    if constraint not in ("bordered", "free"):
        raise ValueError(f"unknown constraint {constraint!r}")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if mode == "fd":
            S = _schur_dense(_fd_hessian(v, p, data), data.n_params, constraint)
        elif constraint == "bordered":
            S = _schur_bordered(v, p, data)
        else:
            S = _schur_free(v, p, data)
    return _invert_with_flags(S)
