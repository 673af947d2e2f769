"""Damped Newton ascent with a backtracking line search and an optional box trust region."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_EPS = np.finfo(float).eps


@dataclass
class AscentResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    # "tol": gradient tolerance met; "boundary": trust region reached;
    # "stalled": no ascent step exists at machine precision; "budget": max_iter reached
    status: str


def newton_ascent(
    fun: Callable[[np.ndarray], float],
    grad_hess: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    tol: float,
    max_iter: int = 200,
    radius: float | None = None,
    guard: Callable[[np.ndarray], None] | None = None,
) -> AscentResult:
    """Maximize ``fun`` from ``x0``.

    The Hessian is made negative definite by replacing the eigenvalues of
    ``-H`` with their absolute values, floored away from zero; every accepted step satisfies an Armijo condition, so values are
    non-decreasing apart from a full Newton step that loses no more than
    rounding noise.  At least one Newton step is always attempted, so a warm
    start that already meets ``tol`` still gets polished to machine precision.

    ``radius`` bounds ``max|x - x0|`` over the whole run.  ``guard`` is called
    on every accepted iterate and may raise to abort (e.g. on separation).
    ``fun`` may raise ``ValueError`` (or return a non-finite value) for
    infeasible points; these are treated as failed trial steps.
    """
    x = np.array(x0, dtype=float)
    origin = x.copy()
    f = fun(x)
    g = np.full_like(x, np.inf)
    for it in range(max_iter):
        g, H = grad_hess(x)
        gnorm = float(np.max(np.abs(g)))
        if not np.isfinite(gnorm):
            return AscentResult(x, f, gnorm, it, False, "stalled")
        if it > 0 and gnorm <= tol:
            return AscentResult(x, f, gnorm, it, True, "tol")
        evals, evecs = np.linalg.eigh(-0.5 * (H + H.T))
        floor = 1e-10 * max(float(np.max(np.abs(evals))), 1.0)
        evals = np.maximum(np.abs(evals), floor)
        step = evecs @ ((evecs.T @ g) / evals)

        hit = False
        if radius is not None:
            scale = 1.0
            for j in np.flatnonzero(step):
                room = radius - np.sign(step[j]) * (x[j] - origin[j])
                scale = min(scale, max(room, 0.0) / abs(step[j]))
            if scale < 1.0:
                hit = True
                step = step * scale

        slope = float(g @ step)
        noise = 64 * _EPS * (1.0 + abs(f))
        t = 1.0
        accepted = False
        while t >= 1e-10:
            trial = x + t * step
            try:
                ft = fun(trial)
            except ValueError:
                ft = -np.inf
            if np.isfinite(ft) and (ft >= f + 1e-4 * t * slope or (t == 1.0 and ft >= f - noise)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return AscentResult(x, f, gnorm, it, gnorm <= tol, "tol" if gnorm <= tol else "stalled")
        x, f = trial, ft
        if guard is not None:
            guard(x)
        if hit:
            g, _ = grad_hess(x)
            return AscentResult(x, f, float(np.max(np.abs(g))), it + 1, False, "boundary")
    g, _ = grad_hess(x)
    gnorm = float(np.max(np.abs(g)))
    return AscentResult(x, f, gnorm, max_iter, gnorm <= tol, "tol" if gnorm <= tol else "budget")
