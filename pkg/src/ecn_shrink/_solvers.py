"""Log-barrier Newton solvers for the two convex subproblems.

Both problems are small and dense (tens of variables) but have many
observation rows, so every Newton step is a handful of matrix products
followed by a tiny dense solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ALPHA = 0.01  # Armijo fraction
_BETA = 0.5  # backtracking factor


@dataclass(frozen=True)
class SolverReport:
    x: np.ndarray
    iterations: int
    converged: bool
    barrier_t: float


def _newton_solve(H, g):
    try:
        return np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, -g, rcond=None)[0]


def _pd_newton_solve(H, g):
    """Solve ``H d = -g`` for a positive definite but badly scaled ``H``.

    Near-active constraints and Hermite columns of very different size push
    the condition number far past what an unscaled LU solve tolerates, so we
    equilibrate with the diagonal first and fall back to a clipped
    eigen-solve if Cholesky still fails.
    """
    d = np.sqrt(np.maximum(np.diag(H), np.finfo(float).tiny))
    Hs = H / d[:, None] / d[None, :]
    gs = g / d
    try:
        L = np.linalg.cholesky(Hs)
        y = np.linalg.solve(L, -gs)
        return np.linalg.solve(L.T, y) / d
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(Hs)
        vals = np.maximum(vals, vals.max() * 1e-14)
        return (vecs @ ((vecs.T @ -gs) / vals)) / d


def maximize_log_affine(
    B: np.ndarray,
    weights: np.ndarray,
    C: np.ndarray,
    penalty: np.ndarray,
    x0: np.ndarray,
    *,
    t0: float = 1.0,
    mu: float = 10.0,
    t_max: float = 1e9,
    newton_tol: float = 1e-10,
    max_newton: int = 200,
    max_total: int = 5000,
) -> SolverReport:
    """Maximize ``sum_j w_j log(1 + B_j x) - sum_l penalty_l |x_l|``
    subject to ``1 + C_i x >= 0``.

    Rows of ``B`` and ``C`` are pre-normalized by the positive intercept of
    the corresponding affine function, which does not change the optimum.
    ``newton_tol`` is in objective units; the final duality gap is at most
    (number of inequality constraints) / ``t_max``.
    Absolute values are split through epigraph variables ``u_l >= |x_l|``
    for every penalized coordinate.  The start ``x0`` must be strictly
    feasible.
    """
    n = B.shape[1]
    pen_idx = np.flatnonzero(penalty > 0)
    gam = penalty[pen_idx]
    npen = len(pen_idx)
    nvar = n + npen
    m_barrier = C.shape[0] + 2 * npen

    x = np.asarray(x0, dtype=float).copy()
    u = np.abs(x[pen_idx]) + 1.0

    def parts(x, u):
        r = 1.0 + B @ x
        c = 1.0 + C @ x
        lo = u - x[pen_idx]
        hi = u + x[pen_idx]
        return r, c, lo, hi

    def feasible(r, c, lo, hi):
        return r.min() > 0 and (c.size == 0 or c.min() > 0) and (npen == 0 or (lo.min() > 0 and hi.min() > 0))

    def phi(t, r, c, lo, hi, u):
        return (
            -t * (weights @ np.log(r) - gam @ u)
            - np.log(c).sum()
            - np.log(lo).sum()
            - np.log(hi).sum()
        )

    r, c, lo, hi = parts(x, u)
    if not feasible(r, c, lo, hi):
        raise ValueError("starting point is not strictly feasible")

    t = t0
    total = 0
    converged = False
    while True:
        for _ in range(max_newton):
            total += 1
            wr = weights / r
            gx = -t * (B.T @ wr) - C.T @ (1.0 / c)
            gx[pen_idx] += 1.0 / lo - 1.0 / hi
            gu = t * gam - 1.0 / lo - 1.0 / hi
            grad = np.concatenate([gx, gu])

            H = np.zeros((nvar, nvar))
            H[:n, :n] = t * (B.T * (weights / r**2)) @ B + (C.T * (1.0 / c**2)) @ C
            dl, dh = 1.0 / lo**2, 1.0 / hi**2
            H[pen_idx, pen_idx] += dl + dh
            H[pen_idx, n + np.arange(npen)] = dh - dl
            H[n + np.arange(npen), pen_idx] = dh - dl
            H[n + np.arange(npen), n + np.arange(npen)] = dl + dh

            step = _pd_newton_solve(H, grad)
            decrement = -grad @ step
            # decrement / (2 t) bounds the suboptimality in objective units
            if decrement / 2 <= newton_tol * t:
                break
            dx, du = step[:n], step[n:]
            f0 = phi(t, r, c, lo, hi, u)
            a = 1.0
            while True:
                xn, un = x + a * dx, u + a * du
                rn, cn, lon, hin = parts(xn, un)
                if feasible(rn, cn, lon, hin) and phi(t, rn, cn, lon, hin, un) <= f0 - _ALPHA * a * decrement:
                    break
                a *= _BETA
                if a < 1e-14:
                    break
            if a < 1e-14:
                # no progress possible at this barrier weight
                break
            x, u, r, c, lo, hi = xn, un, rn, cn, lon, hin
            if total >= max_total:
                return SolverReport(x, total, False, t)
        if m_barrier == 0 or t >= t_max:
            converged = True
            break
        t *= mu
    return SolverReport(_polish(x, x0, B, weights, C, penalty, pen_idx), total, converged, t)


def _polish(x, x0, B, weights, C, penalty, pen_idx, snap=1e-8):
    """Best of the barrier iterate, its kink-snapped copy, and the start.

    The barrier iterate sits strictly inside the feasible set, so exact
    zeros of penalized coordinates are only approached; snapping recovers
    them and comparing against the start guarantees ascent.
    """

    def value(v):
        r = 1.0 + B @ v
        if r.min() <= 0 or (C.size and (1.0 + C @ v).min() < 0):
            return -np.inf
        return weights @ np.log(r) - penalty @ np.abs(v)

    snapped = x.copy()
    small = np.abs(snapped[pen_idx]) < snap
    snapped[pen_idx[small]] = 0.0
    candidates = [x, snapped, np.asarray(x0, dtype=float)]
    return max(candidates, key=value).copy()


def maximize_mixture_weights(
    A: np.ndarray,
    lambda0: float,
    x0: np.ndarray,
    *,
    t0: float = 1.0,
    mu: float = 10.0,
    t_max: float = 1e13,
    newton_tol: float = 1e-12,
    max_newton: int = 200,
) -> SolverReport:
    """Maximize ``sum_j log(A_j pi) + lambda0 log pi_0`` over the simplex.

    Equality-constrained barrier Newton; ``x0`` must be strictly positive
    and sum to one.
    """
    n, K = A.shape
    x = np.asarray(x0, dtype=float)
    x = x / x.sum()

    def phi(t, x, Ax):
        val = np.log(Ax).sum()
        if lambda0 > 0:
            val += lambda0 * np.log(x[0])
        return -t * val - np.log(x).sum()

    Ax = A @ x
    t = t0
    total = 0
    while True:
        for _ in range(max_newton):
            total += 1
            inv = 1.0 / Ax
            grad = -t * (A.T @ inv) - 1.0 / x
            H = t * (A.T * inv**2) @ A + np.diag(1.0 / x**2)
            if lambda0 > 0:
                grad[0] -= t * lambda0 / x[0]
                H[0, 0] += t * lambda0 / x[0] ** 2
            kkt = np.zeros((K + 1, K + 1))
            kkt[:K, :K] = H
            kkt[:K, K] = 1.0
            kkt[K, :K] = 1.0
            sol = _newton_solve(kkt, np.concatenate([grad, [0.0]]))
            dx = sol[:K]
            dx -= dx.sum() / K  # keep the iterate exactly on the simplex
            decrement = -grad @ dx
            if decrement / 2 <= newton_tol * t:
                break
            f0 = phi(t, x, Ax)
            neg = dx < 0
            a = min(1.0, 0.99 * np.min(-x[neg] / dx[neg])) if neg.any() else 1.0
            while True:
                xn = x + a * dx
                Axn = A @ xn
                if xn.min() > 0 and Axn.min() > 0 and phi(t, xn, Axn) <= f0 - _ALPHA * a * decrement:
                    break
                a *= _BETA
                if a < 1e-14:
                    break
            if a < 1e-14:
                break
            x, Ax = xn, Axn
        if t >= t_max:
            break
        t *= mu
    return SolverReport(x / x.sum(), total, True, t)
