"""Data containers and the discretized profile log-likelihood.

Observations from ``K`` case-control studies are stored per study and
addressed through a flat pooled index ``0..N-1`` that is fixed when the
:class:`PooledData` is built.  Jump masses ``p`` and every per-observation
array in this package use that flat order.

The log-likelihood evaluated here is

    l(theta, p) = - sum_t [n_t1 log c_t + n_t0 log(1 - c_t)]
                  + sum_i log p_i
                  + sum_i [y_i log phi_k(i) + (1 - y_i) log(1 - phi_k(i))]

with ``c_t = sum_i phi_t(x_i) p_i`` and ``phi_t(x) = logistic(alpha_t +
beta_t' x)``.  All logarithms of probabilities are taken through
log-sum-exp forms so that saturated linear predictors (which occur during
line searches) never produce ``log(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

__all__ = [
    "DataError",
    "DegenerateMassError",
    "StudyData",
    "PooledData",
    "Theta",
    "parameter_labels",
    "logistic",
    "log_logistic",
    "linear_predictors",
    "case_rates",
    "profile_loglik",
    "score_theta",
    "hessian_theta",
    "score_masses",
    "full_hessian",
    "check_masses",
]


class DataError(ValueError):
    """Raised when study data violate the case-control layout."""


class DegenerateMassError(ValueError):
    """Raised when jump masses give a case rate outside (0, 1) or a non-finite likelihood."""


@dataclass(frozen=True)
class StudyData:
    """One case-control study.

    Parameters
    ----------
    y : array_like of {0, 1}, shape (n,)
        Case (1) / control (0) indicator.
    x : array_like, shape (n, d)
        Covariate rows.  A 1-D array is read as a single covariate.
    study_id : int
        1-based study label, used only for reporting.
    """

    y: np.ndarray
    x: np.ndarray
    study_id: int = 1

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(
                f"study {self.study_id}: x has shape {x.shape}, expected ({y.shape[0]}, d)"
            )
        if not np.all((y == 0) | (y == 1)):
            raise DataError(f"study {self.study_id}: responses must be 0 or 1")
        if not np.all(np.isfinite(x)):
            raise DataError(f"study {self.study_id}: covariates must be finite")
        n1 = int(y.sum())
        if n1 < 1:
            raise DataError(f"study {self.study_id} has no cases")
        if n1 == y.size:
            raise DataError(f"study {self.study_id} has no controls")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n1(self) -> int:
        return int(self.y.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class PooledData:
    """``K`` case-control studies sharing a covariate dimension.

    The flat pooled order concatenates the studies in the given order, keeping
    the row order inside each study.  ``index[j] == (k, i)`` records the
    mapping from flat position ``j`` to study ``k`` (0-based) and row ``i``.
    """

    studies: tuple[StudyData, ...]
    x: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    study: np.ndarray = field(init=False, repr=False)
    n1: np.ndarray = field(init=False, repr=False)
    n0: np.ndarray = field(init=False, repr=False)
    index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        studies = tuple(self.studies)
        if not studies:
            raise DataError("at least one study is required")
        dims = {s.d for s in studies}
        if len(dims) != 1:
            raise DataError(f"studies disagree on covariate dimension: {sorted(dims)}")
        object.__setattr__(self, "studies", studies)
        x = np.vstack([s.x for s in studies])
        y = np.concatenate([s.y for s in studies])
        study = np.concatenate([np.full(s.n, k) for k, s in enumerate(studies)])
        index = np.concatenate(
            [np.column_stack([np.full(s.n, k), np.arange(s.n)]) for k, s in enumerate(studies)]
        )
        for name, arr in (("x", x), ("y", y), ("study", study), ("index", index)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n1", np.array([s.n1 for s in studies], dtype=float))
        object.__setattr__(self, "n0", np.array([s.n0 for s in studies], dtype=float))

    @classmethod
    def from_arrays(cls, study: Sequence[int], y: Sequence[float], x) -> "PooledData":
        """Build from flat columns; ``study`` holds labels 1..K."""
        study = np.asarray(study)
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        labels = np.unique(study)
        if labels.size == 0:
            raise DataError("no observations")
        expected = np.arange(1, labels.size + 1)
        if not np.array_equal(labels, expected):
            raise DataError(f"study labels must be 1..K, got {labels.tolist()}")
        return cls(
            tuple(StudyData(y[study == k], x[study == k], study_id=int(k)) for k in expected)
        )

    @property
    def K(self) -> int:
        return len(self.studies)

    @property
    def d(self) -> int:
        return self.studies[0].d

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def n_params(self) -> int:
        return self.K * (1 + self.d)


@dataclass(frozen=True)
class Theta:
    """Intercepts ``alphas`` (K,) and slopes ``betas`` (K, d).

    The vectorized order is ``(alpha_1..alpha_K, beta_1', ..., beta_K')``.
    """

    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self) -> None:
        alphas = np.array(self.alphas, dtype=float).ravel()
        betas = np.array(self.betas, dtype=float)
        if betas.ndim == 1:
            betas = betas.reshape(alphas.size, -1)
        if betas.shape[0] != alphas.size:
            raise ValueError(f"{alphas.size} intercepts but {betas.shape[0]} slope rows")
        if not (np.all(np.isfinite(alphas)) and np.all(np.isfinite(betas))):
            raise ValueError("Theta entries must be finite")
        alphas.setflags(write=False)
        betas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "betas", betas)

    @property
    def K(self) -> int:
        return self.alphas.size

    @property
    def d(self) -> int:
        return self.betas.shape[1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alphas, self.betas.ravel()])

    @classmethod
    def from_vector(cls, v, K: int, d: int) -> "Theta":
        v = np.asarray(v, dtype=float)
        if v.shape != (K + K * d,):
            raise ValueError(f"expected vector of length {K + K * d}, got shape {v.shape}")
        return cls(v[:K], v[K:].reshape(K, d))

    @classmethod
    def zeros(cls, K: int, d: int) -> "Theta":
        return cls(np.zeros(K), np.zeros((K, d)))

    def study_params(self, k: int) -> np.ndarray:
        """``(alpha_k, beta_k')`` for 0-based study ``k``."""
        return np.concatenate([[self.alphas[k]], self.betas[k]])


def parameter_labels(K: int, d: int) -> list[str]:
    """Names in vectorized order: ``alpha_1, ..., beta_1_1, beta_1_2, ...``."""
    return [f"alpha_{k + 1}" for k in range(K)] + [
        f"beta_{k + 1}_{j + 1}" for k in range(K) for j in range(d)
    ]


def logistic(u):
    """``e^u / (1 + e^u)``, evaluated without overflow for large ``|u|``."""
    return expit(u)


def log_logistic(u):
    """``log(logistic(u))`` without forming the (possibly underflowing) probability."""
    return log_expit(u)


def _theta_vector(theta, data: PooledData) -> np.ndarray:
    if isinstance(theta, Theta):
        if theta.K != data.K or theta.d != data.d:
            raise ValueError(
                f"Theta has K={theta.K}, d={theta.d}; data has K={data.K}, d={data.d}"
            )
        return theta.to_vector()
    v = np.asarray(theta, dtype=float)
    if v.shape != (data.n_params,):
        raise ValueError(f"expected parameter vector of length {data.n_params}")
    return v


def linear_predictors(theta, data: PooledData) -> np.ndarray:
    """``eta[i, t] = alpha_t + beta_t' x_i`` for every pooled row and every study."""
    v = _theta_vector(theta, data)
    K, d = data.K, data.d
    return v[:K][None, :] + data.x @ v[K:].reshape(K, d).T


def check_masses(p, data: PooledData, tol: float = 1e-10) -> np.ndarray:
    """Validate jump masses: positive, aligned with the pooled rows, summing to one."""
    p = np.asarray(p, dtype=float)
    if p.shape != (data.N,):
        raise ValueError(f"expected {data.N} masses, got shape {p.shape}")
    if not np.all(p > 0):
        raise DegenerateMassError("jump masses must be strictly positive")
    if abs(p.sum() - 1.0) > tol:
        raise DegenerateMassError(f"jump masses sum to {p.sum():.15g}, not 1")
    return p


class _Terms:
    """Per-evaluation intermediates shared by the likelihood and its derivatives."""

    def __init__(self, v: np.ndarray, p: np.ndarray, data: PooledData):
        self.eta = data.x @ v[data.K:].reshape(data.K, data.d).T + v[: data.K]
        self.phi = expit(self.eta)
        logp = np.log(p)[:, None]
        a1 = log_expit(self.eta) + logp
        a0 = log_expit(-self.eta) + logp
        # log sum_i phi_t p_i and log sum_i (1 - phi_t) p_i
        self.log_c1 = logsumexp(a1, axis=0)
        self.log_c0 = logsumexp(a0, axis=0)
        # posterior weights phi p / c and (1 - phi) p / (1 - c); each column sums to one
        self.r1 = np.exp(a1 - self.log_c1)
        self.r0 = np.exp(a0 - self.log_c0)
        rows = np.arange(data.N)
        self.own_eta = self.eta[rows, data.study]
        self.own_phi = self.phi[rows, data.study]


def _mass_deficit(p: np.ndarray) -> float:
    return 1.0 - float(np.sum(p))


def case_rates(theta, p, data: PooledData) -> np.ndarray:
    """Mass-weighted case rates ``c_t = sum_i phi_t(x_i) p_i``, t = 1..K."""
    v = _theta_vector(theta, data)
    p = check_masses(p, data)
    c = np.exp(_Terms(v, p, data).log_c1)
    if np.any(c <= 0) or np.any(c >= 1):
        raise DegenerateMassError(f"case rates outside (0, 1): {c}")
    return c


def profile_loglik(theta, p, data: PooledData) -> float:
    """Discretized log-likelihood at ``(theta, p)``.

    ``p`` is taken literally: ``1 - c_t`` is ``(1 - sum p) + sum (1 - phi_t) p``,
    which reduces to the stable log-sum-exp form whenever ``p`` sums to one.
    """
    v = _theta_vector(theta, data)
    p = np.asarray(p, dtype=float)
    if p.shape != (data.N,):
        raise ValueError(f"expected {data.N} masses, got shape {p.shape}")
    if not np.all(p > 0):
        raise DegenerateMassError("jump masses must be strictly positive")
    return _loglik(v, p, data)


def _loglik(v: np.ndarray, p: np.ndarray, data: PooledData, literal: bool = True) -> float:
    # literal=False drops the 1 - sum(p) correction: the result is then invariant
    # to rescaling p and immune to rounding in sum(p) when some c_t is near 1
    tm = _Terms(v, p, data)
    deficit = _mass_deficit(p) if literal else 0.0
    if deficit == 0.0:
        log_1mc = tm.log_c0
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_1mc = tm.log_c0 + np.log1p(deficit * np.exp(-tm.log_c0))
    val = (
        -np.sum(data.n1 * tm.log_c1 + data.n0 * log_1mc)
        + np.sum(np.log(p))
        + np.sum(data.y * log_expit(tm.own_eta) + (1 - data.y) * log_expit(-tm.own_eta))
    )
    if not np.isfinite(val):
        raise DegenerateMassError("log-likelihood is not finite")
    return float(val)


def _design(data: PooledData) -> np.ndarray:
    return np.hstack([np.ones((data.N, 1)), data.x])


def _to_theta_order(G: np.ndarray) -> np.ndarray:
    """(1+d, K) per-study blocks -> vectorized (alphas, betas) order."""
    return np.concatenate([G[0], G[1:].T.ravel()])


def _perm(K: int, d: int) -> np.ndarray:
    """Positions of the study-blocked layout ``[(a_1, b_1), (a_2, b_2), ...]`` in theta order."""
    order = [t * (1 + d) for t in range(K)]
    order += [t * (1 + d) + j for t in range(K) for j in range(1, d + 1)]
    return np.array(order)


def _grad(v, p, data, tm: _Terms | None = None) -> np.ndarray:
    tm = tm or _Terms(v, p, data)
    Z = _design(data)
    # derivative of -n1 log c_t - n0 log(1 - c_t) per observation, times z_i
    q = data.n1 * tm.r1 * (1 - tm.phi) - data.n0 * tm.r0 * tm.phi
    resid = np.zeros((data.N, data.K))
    resid[np.arange(data.N), data.study] = data.y - tm.own_phi
    G = Z.T @ (resid - q)
    return _to_theta_order(G)


def score_theta(theta, p, data: PooledData) -> np.ndarray:
    """Exact gradient of :func:`profile_loglik` in ``theta`` at fixed masses."""
    v = _theta_vector(theta, data)
    p = check_masses(p, data)
    return _grad(v, p, data)


def _hess(v, p, data, tm: _Terms | None = None) -> np.ndarray:
    tm = tm or _Terms(v, p, data)
    K, d = data.K, data.d
    Z = _design(data)
    m = 1 + d
    H = np.zeros((K * m, K * m))
    for t in range(K):
        phi = tm.phi[:, t]
        r1, r0 = tm.r1[:, t], tm.r0[:, t]
        m1 = Z.T @ (r1 * (1 - phi))
        m0 = Z.T @ (r0 * phi)
        # Hessians of log c_t and log(1 - c_t)
        h1 = (Z.T * (r1 * (1 - phi) * (1 - 2 * phi))) @ Z - np.outer(m1, m1)
        h0 = -(Z.T * (r0 * phi * (1 - 2 * phi))) @ Z - np.outer(m0, m0)
        own = data.study == t
        Zt = Z[own]
        w = phi[own] * (1 - phi[own])
        H[t * m:(t + 1) * m, t * m:(t + 1) * m] = (
            -data.n1[t] * h1 - data.n0[t] * h0 - (Zt.T * w) @ Zt
        )
    order = _perm(K, d)
    return H[np.ix_(order, order)]


def hessian_theta(theta, p, data: PooledData) -> np.ndarray:
    """Exact Hessian of :func:`profile_loglik` in ``theta`` at fixed masses."""
    v = _theta_vector(theta, data)
    p = check_masses(p, data)
    return _hess(v, p, data)


def score_masses(theta, p, data: PooledData) -> np.ndarray:
    """Gradient of :func:`profile_loglik` in the masses, each ``p_i`` treated as free."""
    v = _theta_vector(theta, data)
    p = np.asarray(p, dtype=float)
    c = p @ expit(linear_predictors(v, data))
    a = data.n1 / c - data.n0 / (1 - c)
    return 1.0 / p - expit(linear_predictors(v, data)) @ a


def _cross_blocks(v, p, data):
    """Mixed and mass-mass second derivatives of the likelihood with free masses.

    Returns ``(B, gamma, phi)`` with ``B`` the (n_params, N) mixed block and
    ``d2l/dp dp' = -diag(1/p^2) + phi diag(gamma) phi'``.
    """
    K, d, N = data.K, data.d, data.N
    Z = _design(data)
    phi = expit(linear_predictors(v, data))
    c = p @ phi
    a = data.n1 / c - data.n0 / (1 - c)
    gamma = data.n1 / c**2 + data.n0 / (1 - c) ** 2
    w = phi * (1 - phi)
    B = np.zeros((K * (1 + d), N))
    m = 1 + d
    for t in range(K):
        dc = Z.T @ (w[:, t] * p)
        B[t * m:(t + 1) * m] = gamma[t] * np.outer(dc, phi[:, t]) - a[t] * (Z.T * w[:, t])
    return B[_perm(K, d)], gamma, phi


def full_hessian(theta, p, data: PooledData) -> np.ndarray:
    """Dense Hessian of :func:`profile_loglik` in ``(theta, p)`` with free masses.

    Intended for small ``N``; the covariance estimator never forms this matrix.
    """
    v = _theta_vector(theta, data)
    p = check_masses(p, data)
    A = _hess(v, p, data)
    B, gamma, phi = _cross_blocks(v, p, data)
    D = -np.diag(1.0 / p**2) + (phi * gamma) @ phi.T
    return np.block([[A, B], [B.T, D]])
