"""Known covariate densities for the retrospective baseline and for true case rates."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import quad_vec
from scipy.special import expit

__all__ = ["QuadratureError", "StandardNormalDensity", "LinearMoments"]


class QuadratureError(ArithmeticError):
    """Quadrature did not settle under node refinement."""


@lru_cache(maxsize=None)
def _rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    # nodes/weights for E[g(Z)], Z ~ N(0, 1)
    t, w = hermgauss(n)
    z = np.sqrt(2.0) * t
    w = w / np.sqrt(np.pi)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


@dataclass(frozen=True)
class LinearMoments:
    """``c = E[phi(a + b'X)]`` with its gradient and Hessian in ``(a, b)``."""

    c: float
    grad: np.ndarray
    hess: np.ndarray


@dataclass(frozen=True)
class StandardNormalDensity:
    """Independent standard normal covariates in ``d`` dimensions.

    Expectations of functions of a linear predictor ``a + b'X`` reduce to one
    dimension because ``b'X ~ N(0, |b|^2)``; they are computed by
    Gauss-Hermite quadrature with ``nodes`` points and checked against twice
    as many.  If the two disagree by more than ``tol`` the node count keeps
    doubling up to ``max_nodes``; a logistic too steep for that (large
    ``|b|``) is integrated adaptively on either side of its midpoint instead.
    """

    d: int = 1
    nodes: int = 61
    tol: float = 1e-8
    max_nodes: int = 244

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.exp(-0.5 * np.sum(x * x, axis=1)) / (2 * np.pi) ** (self.d / 2)

    def _expect(self, g, center: float) -> np.ndarray:
        # E[g(Z)] for vector-valued g: Hermite rule under refinement, else adaptive
        n = self.nodes
        prev = None
        while n <= self.max_nodes:
            z, w = _rule(n)
            val = g(z) @ w
            if not np.all(np.isfinite(val)):
                raise QuadratureError("non-finite integrand")
            if prev is not None and np.max(np.abs(val - prev)) <= self.tol:
                return val
            prev = val
            n *= 2

        def h(z):
            return g(np.atleast_1d(z))[..., 0] * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

        total = 0.0
        for lo, hi in ((-np.inf, center), (center, np.inf)):
            part, err = quad_vec(h, lo, hi, epsabs=0.1 * self.tol, epsrel=1e-10)
            if not np.all(np.isfinite(part)) or err > self.tol:
                raise QuadratureError(f"integral not settled (error estimate {err:.2g})")
            total = total + part
        return np.asarray(total)

    def expect(self, g) -> float:
        """``E[g(Z)]`` for scalar ``Z ~ N(0, 1)`` and vectorized scalar ``g``."""
        return float(self._expect(lambda z: np.atleast_1d(g(z))[None, :], 0.0)[0])

    def case_rate(self, alpha: float, beta) -> float:
        """``E[phi(alpha + beta'X)]``."""
        s = float(np.linalg.norm(np.atleast_1d(beta)))
        if s == 0.0:
            return float(expit(alpha))
        center = float(np.clip(-alpha / s, -40.0, 40.0))
        return float(self._expect(lambda z: expit(alpha + s * z)[None, :], center)[0])

    def linear_moments(self, alpha: float, beta) -> LinearMoments:
        """Case rate and its first two derivatives in ``(alpha, beta)``.

        With ``u = beta / |beta|`` and ``Z = u'X``,
        ``E[g X] = E[g Z] u`` and ``E[g X X'] = E[g Z^2] u u' + E[g] (I - u u')``.
        """
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        d = beta.size
        s = float(np.linalg.norm(beta))
        u = beta / s if s > 0 else np.zeros(d)

        def moments(z):
            phi = expit(alpha + s * z)
            d1 = phi * (1 - phi)
            d2 = d1 * (1 - 2 * phi)
            return np.stack([phi, d1, d1 * z, d2, d2 * z, d2 * z * z])

        center = float(np.clip(-alpha / s, -40.0, 40.0)) if s > 0 else 0.0
        c, e1, e1z, e2, e2z, e2zz = self._expect(moments, center)
        grad = np.concatenate([[e1], e1z * u])
        hess = np.empty((d + 1, d + 1))
        hess[0, 0] = e2
        hess[0, 1:] = hess[1:, 0] = e2z * u
        uu = np.outer(u, u)
        hess[1:, 1:] = e2zz * uu + e2 * (np.eye(d) - uu)
        return LinearMoments(float(c), grad, hess)
