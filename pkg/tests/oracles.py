"""Independent reference computations used by the tests.

Nothing here calls into the package except for the data containers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_loglik(alphas, betas, p, studies) -> float:
    """Log-likelihood by explicit loops over studies and observations.

    ``studies`` is a list of (y, x) with x of shape (n, d); ``p`` is flat in
    the pooled order (studies concatenated).
    """
    K = len(studies)
    rows = [(k, yi, xi) for k, (y, x) in enumerate(studies) for yi, xi in zip(y, x)]

    def phi(t, x):
        u = alphas[t] + sum(b * v for b, v in zip(betas[t], x))
        return 1.0 / (1.0 + math.exp(-u))

    total = 0.0
    for t in range(K):
        c = 0.0
        for (k, yi, xi), pi in zip(rows, p):
            c += phi(t, xi) * pi
        n1 = sum(1 for yi in studies[t][0] if yi == 1)
        n0 = len(studies[t][0]) - n1
        total -= n1 * math.log(c) + n0 * math.log(1.0 - c)
    for (k, yi, xi), pi in zip(rows, p):
        total += math.log(pi)
        f = phi(k, xi)
        total += math.log(f) if yi == 1 else math.log(1.0 - f)
    return total


def brute_mass_update(alphas, betas, p, studies) -> np.ndarray:
    K = len(studies)
    xs = [xi for (_, x) in studies for xi in x]

    def phi(t, x):
        return 1.0 / (1.0 + math.exp(-(alphas[t] + sum(b * v for b, v in zip(betas[t], x)))))

    c = [sum(phi(t, xi) * pi for xi, pi in zip(xs, p)) for t in range(K)]
    out = []
    for xi in xs:
        den = 0.0
        for t, (y, _) in enumerate(studies):
            n1 = int(sum(y))
            n0 = len(y) - n1
            den += n1 * phi(t, xi) / c[t] + n0 * (1 - phi(t, xi)) / (1 - c[t])
        out.append(1.0 / den)
    return np.array(out)


def central_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_hessian(f, x, h):
    """Second differences of a scalar function; ``h`` may be a vector of steps."""
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


# ---------------------------------------------------------------------------
# profile over the masses through the convex dual
# ---------------------------------------------------------------------------


def _logistic_log(u):
    return -np.logaddexp(0.0, -u)


class MassProfile:
    """``max_p l(theta, p)`` over the simplex for a batch of parameter vectors.

    For fixed ``theta`` the mass part of the likelihood is
    ``sum_i log p_i - sum_s n_s log(sum_i w_si p_i)`` over the ``2K`` strata
    ``s = (t, y)`` with weights ``phi_t`` and ``1 - phi_t``.  Its maximum over
    the simplex equals ``-min_z D(z)`` with the convex dual
    ``D(z) = sum_i log sum_s n_s w_si e^{z_s} - n'z``, which is minimized here by
    damped Newton with ``z_0 = 0`` fixed.
    """

    def __init__(self, study, y, x):
        self.study = np.asarray(study)
        self.y = np.asarray(y, dtype=float)
        self.x = np.asarray(x, dtype=float).reshape(len(self.y), -1)
        self.K = int(self.study.max()) + 1
        self.n1 = np.array([self.y[self.study == k].sum() for k in range(self.K)])
        self.n0 = np.array([(self.study == k).sum() for k in range(self.K)]) - self.n1
        self.n = np.concatenate([self.n1, self.n0])

    def __call__(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        K, d = self.K, self.x.shape[1]
        B = thetas.shape[0]
        alphas = thetas[:, :K]
        betas = thetas[:, K:].reshape(B, K, d)
        eta = alphas[:, None, :] + np.einsum("nd,bkd->bnk", self.x, betas)  # B, N, K
        logw = np.concatenate([_logistic_log(eta), _logistic_log(-eta)], axis=2) + np.log(self.n)
        z = np.zeros((B, 2 * K))
        val = self._dual(logw, z)
        active = np.arange(B)
        for _ in range(200):
            lw, za, va = logw[active], z[active], val[active]
            g, H = self._derivs(lw, za)
            g[:, 0] = 0.0
            H[:, 0, :] = 0.0
            H[:, :, 0] = 0.0
            H[:, 0, 0] = 1.0
            step = -np.linalg.solve(H + 1e-12 * np.eye(2 * K), g[..., None])[..., 0]
            slope = np.einsum("bi,bi->b", g, step)
            t = np.ones(len(active))
            for _ in range(40):
                trial = self._dual(lw, za + t[:, None] * step)
                bad = trial > va + 1e-4 * t * slope
                if not bad.any():
                    break
                t = np.where(bad, t / 2, t)
            ok = ~bad
            z[active[ok]] = za[ok] + t[ok, None] * step[ok]
            val[active[ok]] = trial[ok]
            # stop on a small gradient or when no decrease is representable
            done = (np.max(np.abs(g), axis=1) < 1e-11) | ~ok
            active = active[~done]
            if active.size == 0:
                break
        own = eta[:, np.arange(len(self.y)), self.study]
        fixed = (self.y * _logistic_log(own) + (1 - self.y) * _logistic_log(-own)).sum(axis=1)
        return -val + fixed

    def _dual(self, logw, z):
        a = logw + z[:, None, :]
        m = a.max(axis=2, keepdims=True)
        lse = (m[..., 0] + np.log(np.exp(a - m).sum(axis=2))).sum(axis=1)
        return lse - z @ self.n

    def _derivs(self, logw, z):
        a = logw + z[:, None, :]
        a = a - a.max(axis=2, keepdims=True)
        R = np.exp(a)
        R /= R.sum(axis=2, keepdims=True)
        g = R.sum(axis=1) - self.n
        H = np.einsum("bns,st->bst", R, np.eye(R.shape[2])) - np.einsum("bns,bnt->bst", R, R)
        return g, H


STEPS = (0.5, 0.25, 0.1, 0.05, 0.02, 0.01)


def grid_argmax(profile, dim, lo=-4.0, hi=4.0, fixed=None, steps=STEPS):
    """Exhaustive unit grid on ``[lo, hi]^dim``, then hill-climbing on local grids.

    Each refinement level climbs on a ``5^dim`` window of the current step
    until the centre is the best point, so the result is a local maximum of
    the finest grid.  A level that keeps climbing beyond three coarser steps
    is taken as a ridge and the instance is reported as not interior.  ``fixed`` maps coordinate index -> value for coordinates
    held constant.  Returns (argmax, value, interior) where ``interior`` is
    False if the search ever touched the box boundary.
    """
    fixed = fixed or {}
    free = [j for j in range(dim) if j not in fixed]

    def full(points):
        out = np.zeros((points.shape[0], dim))
        out[:, free] = points
        for j, v in fixed.items():
            out[:, j] = v
        return out

    def evaluate(points):
        chunks = np.array_split(points, max(1, len(points) // 4000))
        return np.concatenate([profile(full(c)) for c in chunks])

    axis = np.arange(lo, hi + 1e-9, 1.0)
    pts = np.array(list(itertools.product(axis, repeat=len(free))))
    vals = evaluate(pts)
    best = pts[np.argmax(vals)]
    if np.any((best <= lo) | (best >= hi)):
        return full(best[None, :])[0], float(vals.max()), False
    interior = True
    prev = 1.0
    for step in steps:
        window = np.array(list(itertools.product(np.arange(-2, 3) * step, repeat=len(free))))
        for _ in range(int(np.ceil(3 * prev / step))):
            local = np.round(best + window, 10)
            new = local[np.argmax(evaluate(local))]
            if np.allclose(new, best, atol=1e-12):
                break
            best = new
            if np.any((best <= lo) | (best >= hi)):
                # the supremum lies outside the box; give up on this instance
                return full(best[None, :])[0], float(np.max(evaluate(local))), False
        else:
            # still climbing far from where the coarser level left off: a ridge
            return full(best[None, :])[0], float(np.max(evaluate(local))), False
        prev = step
    if np.any(np.isclose(best, lo) | np.isclose(best, hi)) or np.any((best < lo) | (best > hi)):
        interior = False
    return full(best[None, :])[0], float(profile(full(best[None, :]))[0]), interior


def random_instance(rng, max_n=8):
    """Small d = 1 pooled instance with K in {1, 2} and overlapping case and control covariates."""
    K = int(rng.integers(1, 3))
    while True:
        sizes = rng.integers(2, max_n // K + 1, size=K)
        if sizes.sum() <= max_n:
            break
    study, y, x = [], [], []
    for k, n in enumerate(sizes):
        while True:
            yy = rng.permutation(np.r_[np.ones(int(rng.integers(1, n))), np.zeros(n)][:n])
            if 0 < yy.sum() < n:
                break
        xx = np.round(rng.normal(size=n) + rng.normal() * yy, 2)
        cases, controls = xx[yy == 1], xx[yy == 0]
        if not (cases.min() < controls.max() and controls.min() < cases.max()):
            # force overlap: swap the extreme values of the two pools
            i, j = np.argmax(xx * (yy == 1) - 1e9 * (yy == 0)), np.argmin(xx + 1e9 * (yy == 1))
            xx[i], xx[j] = xx[j], xx[i]
        study += [k] * n
        y += list(yy)
        x += list(xx)
    return np.array(study), np.array(y, dtype=int), np.array(x)
