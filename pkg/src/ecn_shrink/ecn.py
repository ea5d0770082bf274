"""Exchangeable correlated noise: fit a Gaussian-derivative density to z-scores.

The noise density is ``f(x; w) = phi(x) + sum_l w_l phi^(l)(x)/sqrt(l!)`` for
``l = 1..L``.  ``w`` is estimated by maximizing the log-likelihood of the
z-scores minus a weighted L1 penalty on the even-order coefficients, while
keeping ``f`` nonnegative (up to EPS_FEAS) on a fine grid and positive at
every observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import gdbasis
from ._solvers import maximize_log_affine

MIN_OBSERVATIONS = 50
EPS_FEAS = 1e-8


@dataclass(frozen=True)
class EcnPenalty:
    gamma: float = 10.0
    rho: float = 0.5
    L: int = 10

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not 1 <= self.L <= gdbasis.L_MAX:
            raise ValueError(f"L must lie in [1, {gdbasis.L_MAX}], got {self.L}")

    def weights(self) -> np.ndarray:
        """gamma_l for l = 1..L: zero for odd l, gamma / rho^(l/2) for even l."""
        l = np.arange(1, self.L + 1)
        return np.where(l % 2 == 0, self.gamma / self.rho ** (l / 2), 0.0)


@dataclass(frozen=True)
class ConstraintGrid:
    lo: float = -10.0
    hi: float = 10.0
    step: float = 0.001

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("constraint grid needs lo < hi")
        if not self.step > 0:
            raise ValueError("constraint grid step must be positive")

    def points(self) -> np.ndarray:
        n = int(round((self.hi - self.lo) / self.step))
        return self.lo + self.step * np.arange(n + 1)


@dataclass(frozen=True)
class EcnFit:
    omega: np.ndarray
    objective: float
    iterations: int
    n_active: int
    converged: bool
    penalty: EcnPenalty = field(default_factory=EcnPenalty)


def ecn_density(omega, x):
    """Density of the fitted noise; can dip slightly below zero off-grid."""
    return gdbasis.expansion_density(omega, x)


def penalty_value(omega, pen: EcnPenalty) -> float:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (pen.L,):
        raise ValueError(f"omega must have length {pen.L}")
    return float(pen.weights() @ np.abs(omega))


def scaled_basis_rows(x, L: int) -> np.ndarray:
    """Rows ``phi^(l)(x) / (sqrt(l!) phi(x))`` for l = 1..L.

    ``f(x; w) >= 0`` is equivalent to ``1 + rows @ w >= 0``.
    """
    h = gdbasis.hermite_table(L, x)[..., 1:]
    l = np.arange(1, L + 1)
    return h * ((-1.0) ** l / gdbasis.sqrt_factorial(l))


@lru_cache(maxsize=8)
def grid_rows(grid: ConstraintGrid, L: int) -> np.ndarray:
    """Rows for ``f(z; w) >= -EPS_FEAS`` on the grid, written as ``1 + rows @ w >= 0``.

    The slack is absolute, so it barely binds where phi is tiny.
    """
    pts = grid.points()
    h = 1.0 + EPS_FEAS / gdbasis.normal_pdf(pts)
    rows = scaled_basis_rows(pts, L) / h[:, None]
    rows.setflags(write=False)
    return rows


def is_feasible(omega, grid: ConstraintGrid, tol: float = EPS_FEAS) -> bool:
    """True when ``f(z; omega) >= -tol`` at every grid point."""
    omega = np.asarray(omega, dtype=float)
    pts = grid.points()
    f = gdbasis.normal_pdf(pts) * (1.0 + grid_rows(grid, len(omega)) @ omega)
    return bool(f.min() >= -tol)


def ecn_objective(omega, z, pen: EcnPenalty) -> float:
    """Penalized log-likelihood; -inf where the density is not positive at the data."""
    f = ecn_density(omega, np.asarray(z, dtype=float))
    if np.any(f <= 0):
        return -np.inf
    return float(np.log(f).sum() - penalty_value(omega, pen))


def validate_z(z, grid: ConstraintGrid) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError("z must be a 1-d vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("z contains NaN or infinite values")
    if z.size < MIN_OBSERVATIONS:
        raise ValueError(f"need at least {MIN_OBSERVATIONS} z-scores, got {z.size}")
    outside = np.flatnonzero((z < grid.lo) | (z > grid.hi))
    if outside.size:
        j = outside[0]
        raise ValueError(
            f"z[{j}] = {z[j]:g} lies outside the constraint grid [{grid.lo:g}, {grid.hi:g}]; "
            f"{outside.size} value(s) out of range"
        )
    return z


def fit_ecn(
    z,
    pen: EcnPenalty | None = None,
    grid: ConstraintGrid | None = None,
    tol: float = 1e-8,
    init=None,
) -> EcnFit:
    """Penalized maximum-likelihood fit of the noise coefficients to z-scores."""
    pen = pen or EcnPenalty()
    grid = grid or ConstraintGrid()
    z = validate_z(z, grid)
    B = scaled_basis_rows(z, pen.L)
    return _fit_rows(B, np.ones(len(z)), pen, grid, init, tol,
                     objective=lambda w: ecn_objective(w, z, pen))


def _fit_rows(B, weights, pen, grid, init, tol, objective) -> EcnFit:
    C = grid_rows(grid, pen.L)
    x0 = np.zeros(pen.L)
    if init is not None:
        init = np.asarray(init, dtype=float)
        if (1.0 + B @ init).min() > 0 and (1.0 + C @ init).min() > 0:
            x0 = init
    # duality gap m / t_max must stay below tol * (number of observations)
    m = C.shape[0] + 2 * pen.L
    t_max = max(1e9, 10.0 * m / (tol * weights.sum()))
    rep = maximize_log_affine(B, weights, C, pen.weights(), x0, t_max=t_max)
    omega = rep.x
    slack = 1.0 + C @ omega
    n_active = int(np.count_nonzero(slack < 1e-6))
    return EcnFit(omega, objective(omega), rep.iterations, n_active, rep.converged, pen)
