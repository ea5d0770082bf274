"""Joint estimation of a scale-mixture prior and the correlated-noise density.

Model: ``X_j = theta_j + s_j Z_j`` with ``theta_j ~ g`` (point mass at zero
plus zero-mean Gaussians on a fixed grid of scales) and ``Z_j`` iid from
the Gaussian-derivative noise density.  The penalized marginal likelihood
is biconvex in (pi, omega); we alternate exact maximization over each block
and polish with a joint Newton step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from . import gdbasis
from ._solvers import maximize_mixture_weights
from .ecn import (
    MIN_OBSERVATIONS,
    ConstraintGrid,
    EcnFit,
    EcnPenalty,
    _fit_rows,
    grid_rows,
    penalty_value,
)

log = logging.getLogger(__name__)

EPS_LIK = 1e-300
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).ravel()
        s = np.asarray(self.s, dtype=float).ravel()
        if x.shape != s.shape:
            raise ValueError(f"x and s differ in length ({x.size} vs {s.size})")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s))):
            raise ValueError("x and s must be finite")
        if np.any(s <= 0):
            raise ValueError("standard deviations s must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "s", s)

    @classmethod
    def from_z(cls, z) -> "Dataset":
        z = np.asarray(z, dtype=float)
        return cls(z, np.ones_like(z))

    def __len__(self):
        return self.x.size


@dataclass(frozen=True)
class MixturePrior:
    """Null weight ``pi[0]`` on a point mass; ``pi[k]`` on N(0, sigma_grid[k-1]^2)."""

    sigma_grid: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        sg = np.asarray(self.sigma_grid, dtype=float).ravel()
        pi = np.asarray(self.pi, dtype=float).ravel()
        if pi.size != sg.size + 1:
            raise ValueError("pi needs one more entry than sigma_grid (the null weight)")
        if np.any(sg <= 0) or np.any(np.diff(sg) <= 0):
            raise ValueError("sigma_grid must be positive and strictly increasing")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("pi must be nonnegative and sum to one")
        object.__setattr__(self, "sigma_grid", sg)
        object.__setattr__(self, "pi", pi / pi.sum())

    @property
    def pi0(self) -> float:
        return float(self.pi[0])

    @property
    def all_scales(self) -> np.ndarray:
        return np.concatenate([[0.0], self.sigma_grid])

    def cdf(self, t):
        """CDF of the prior g evaluated at t."""
        from scipy.special import ndtr

        t = np.asarray(t, dtype=float)
        out = self.pi[0] * (t >= 0)
        for w, sg in zip(self.pi[1:], self.sigma_grid):
            out = out + w * ndtr(t / sg)
        return out


@dataclass(frozen=True)
class CashConfig:
    pen: EcnPenalty = field(default_factory=EcnPenalty)
    lambda0: float = 10.0
    grid: ConstraintGrid = field(default_factory=ConstraintGrid)
    max_outer_iters: int = 50
    outer_tol: float = 1e-6
    sigma_grid: tuple | None = None

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be nonnegative")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")


@dataclass(frozen=True)
class CashFit:
    prior: MixturePrior
    omega: np.ndarray
    p_matrix: np.ndarray
    trace: list
    converged: bool
    config: CashConfig = field(default_factory=CashConfig)
    objective: float = float("nan")


def default_sigma_grid(data: Dataset) -> np.ndarray:
    """Geometric grid (ratio sqrt 2) from min(s)/10 up to the first value covering
    2 * sqrt(max(x^2 - s^2)), falling back to max(s) when no x exceeds its s."""
    x, s = data.x, data.s
    lo = s.min() / 10.0
    excess = np.maximum(x * x - s * s, 0.0).max()
    hi = 2.0 * math.sqrt(excess) if excess > 0 else s.max()
    n = max(0, math.ceil(math.log(hi / lo) / math.log(SQRT2) - 1e-9))
    return lo * SQRT2 ** np.arange(n + 1)


def likelihood_tables(data: Dataset, sigma_grid, L: int) -> np.ndarray:
    """p_jkl for all observations j, scales k (k = 0 is the point mass), orders l."""
    scales = np.concatenate([[0.0], np.asarray(sigma_grid, dtype=float)])
    P, _ = gdbasis.conv_tables(data.x, data.s, scales, L)
    return P


def component_densities(P: np.ndarray, omega) -> np.ndarray:
    """Marginal density of each observation under each prior component, (n, K+1)."""
    omega = np.asarray(omega, dtype=float)
    return P[..., 0] + P[..., 1:] @ omega


def _loglik_from(dens: np.ndarray, pi: np.ndarray) -> float:
    inner = dens @ pi
    if np.any(inner <= 0):
        log.warning("%d observation(s) with nonpositive marginal density; omega infeasible",
                    int(np.count_nonzero(inner <= 0)))
        return -np.inf
    return float(np.log(np.maximum(inner, EPS_LIK)).sum())


def marginal_loglik(prior: MixturePrior, omega, data: Dataset) -> float:
    """Log marginal likelihood of (pi, omega), integrating out theta and Z."""
    omega = np.asarray(omega, dtype=float)
    P = likelihood_tables(data, prior.sigma_grid, len(omega))
    return _loglik_from(component_densities(P, omega), prior.pi)


def penalized_objective(pi, omega, P, lambda0: float, pen: EcnPenalty) -> float:
    val = _loglik_from(component_densities(P, omega), pi)
    if lambda0 > 0:
        val += lambda0 * math.log(pi[0]) if pi[0] > 0 else -np.inf
    return val - penalty_value(omega, pen)


def _solve_pi(dens: np.ndarray, lambda0: float, init=None) -> np.ndarray:
    A = np.maximum(dens, 0.0)
    rowmax = A.max(axis=1)
    keep = rowmax > 0
    if not keep.all():
        log.warning("dropping %d observation(s) with all-zero likelihood from the pi-step",
                    int(np.count_nonzero(~keep)))
    A = A[keep] / rowmax[keep, None]
    K = A.shape[1]
    x0 = np.full(K, 1.0 / K)
    if init is not None:
        x0 = 0.5 * x0 + 0.5 * np.asarray(init, dtype=float)
    return maximize_mixture_weights(A, lambda0, x0).x


def kkt_residual(dens: np.ndarray, pi, lambda0: float) -> float:
    """Scaled KKT violation of the pi-subproblem at ``pi``.

    At the optimum every component's gradient is at most n + lambda0, with
    equality on the support.
    """
    A = np.maximum(dens, 0.0)
    A = A[A.max(axis=1) > 0]
    pi = np.asarray(pi, dtype=float)
    grad = A.T @ (1.0 / (A @ pi))
    if lambda0 > 0:
        grad[0] += lambda0 / pi[0]
    N = A.shape[0] + lambda0
    rel = grad / N - 1.0
    return float(max(np.max(np.maximum(rel, 0.0)), np.max(pi * np.abs(rel))))


def pi_step(data: Dataset, omega, sigma_grid, lambda0: float = 10.0, init_pi=None) -> MixturePrior:
    """Optimal mixture weights for fixed noise coefficients."""
    omega = np.asarray(omega, dtype=float)
    P = likelihood_tables(data, sigma_grid, len(omega))
    pi = _solve_pi(component_densities(P, omega), lambda0, init_pi)
    return MixturePrior(sigma_grid, pi)


def _omega_step(P, pi, pen, grid, init, objective) -> EcnFit:
    a = P[..., 0] @ pi
    B = np.einsum("jkl,k->jl", P[..., 1:], pi)
    keep = a > EPS_LIK
    if init is not None:
        init = np.asarray(init, dtype=float)
        if (a[keep] + B[keep] @ init).min() <= 0:
            log.warning("omega-step start is infeasible; restarting from omega = 0")
            init = None
    return _fit_rows(B[keep] / a[keep, None], np.ones(int(keep.sum())), pen, grid, init, 1e-9, objective)


def omega_step(data: Dataset, prior: MixturePrior, pen: EcnPenalty | None = None,
               grid: ConstraintGrid | None = None, init_omega=None) -> EcnFit:
    """Optimal noise coefficients for a fixed prior."""
    pen = pen or EcnPenalty()
    grid = grid or ConstraintGrid()
    P = likelihood_tables(data, prior.sigma_grid, pen.L)

    def objective(w):
        return _loglik_from(component_densities(P, w), prior.pi) - penalty_value(w, pen)

    return _omega_step(P, prior.pi, pen, grid, init_omega, objective)


def _joint_refine(P, pi, omega, pen: EcnPenalty, lambda0: float, C,
                  t_stages=tuple(10.0 ** np.arange(4, 10)), max_iter: int = 60):
    """Barrier path-following on (pi restricted to its support, omega) jointly.

    Alternating block maximization crawls when pi and omega trade off along
    a ridge bent by the active grid constraints.  The joint problem is only
    biconvex, so each Newton system uses absolute eigenvalues of the
    equilibrated reduced Hessian with Levenberg-Marquardt damping; callers
    keep the result only if it improves the penalized objective.
    """
    # tiny weights stay fixed: their barrier curvature would swamp the Hessian
    support = np.flatnonzero(pi > 1e-6)
    ns, L = support.size, pen.L
    if ns < 2:
        return pi, omega
    fixed = np.setdiff1d(np.arange(pi.size), support)
    a_fixed = P[:, fixed, 0] @ pi[fixed]
    B_fixed = np.einsum("jkl,k->jl", P[:, fixed, 1:], pi[fixed])
    Ps = P[:, support, :]
    gam_all = pen.weights()
    pen_idx = np.flatnonzero(gam_all > 0)
    gam = gam_all[pen_idx]
    null_w = support[0] == 0 and lambda0 > 0
    nq, npen = ns - 1, pen_idx.size
    T = np.zeros((ns + L + npen, nq + L + npen))
    T[:ns, :nq] = null_space(np.ones((1, ns)))
    T[ns:, nq:] = np.eye(L + npen)
    wi, ui = ns + pen_idx, ns + L + np.arange(npen)

    def parts(p, w, u):
        D = Ps[..., 0] + Ps[..., 1:] @ w
        return D, D @ p + a_fixed + B_fixed @ w, 1.0 + C @ w, u - w[pen_idx], u + w[pen_idx]

    def barrier(t, p, y, u, c, lo, hi):
        if p.min() <= 0 or y.min() <= 0 or c.min() <= 0 or lo.min() <= 0 or hi.min() <= 0:
            return np.inf
        val = np.log(y).sum() - gam @ u
        if null_w:
            val += lambda0 * np.log(p[0])
        return -t * val - np.log(p).sum() - np.log(c).sum() - np.log(lo).sum() - np.log(hi).sum()

    p = pi[support].copy()
    w = np.asarray(omega, dtype=float).copy()
    a = 1.0 / (t_stages[0] * gam)
    u = a + np.sqrt(a * a + w[pen_idx] ** 2)
    D, y, c, lo, hi = parts(p, w, u)
    if not np.isfinite(barrier(1.0, p, y, u, c, lo, hi)):
        return pi, omega
    mu = 1e-6
    for t in t_stages:
        f = barrier(t, p, y, u, c, lo, hi)
        for _ in range(max_iter):
            r = 1.0 / y
            Bw = np.einsum("jsl,s->jl", Ps[..., 1:], p) + B_fixed
            g_p = -t * (D.T @ r) - 1.0 / p
            if null_w:
                g_p[0] -= t * lambda0 / p[0]
            g_w = -t * (Bw.T @ r) - C.T @ (1.0 / c)
            g_w[pen_idx] += 1.0 / lo - 1.0 / hi
            g_u = t * gam - 1.0 / lo - 1.0 / hi
            grad = np.concatenate([g_p, g_w, g_u])

            J = np.hstack([D, Bw]) * r[:, None]
            H = np.zeros((ns + L + npen,) * 2)
            H[: ns + L, : ns + L] = t * J.T @ J
            cross = t * np.einsum("j,jsl->sl", r, Ps[..., 1:])
            H[:ns, ns : ns + L] -= cross
            H[ns : ns + L, :ns] -= cross.T
            H[:ns, :ns] += np.diag(1.0 / p**2)
            if null_w:
                H[0, 0] += t * lambda0 / p[0] ** 2
            H[ns : ns + L, ns : ns + L] += (C.T * (1.0 / c**2)) @ C
            dl, dh = 1.0 / lo**2, 1.0 / hi**2
            H[wi, wi] += dl + dh
            H[wi, ui] += dh - dl
            H[ui, wi] += dh - dl
            H[ui, ui] += dl + dh

            Hr, gr = T.T @ H @ T, T.T @ grad
            d = np.sqrt(np.maximum(np.abs(np.diag(Hr)), np.finfo(float).tiny))
            vals, vecs = np.linalg.eigh(Hr / d[:, None] / d[None, :])
            vals = np.abs(vals)
            proj = vecs.T @ (-gr / d)
            if proj @ (proj / np.maximum(vals, vals.max() * 1e-12)) / 2 <= 1e-3:
                break
            while mu < 1e8:
                step = T @ ((vecs @ (proj / (vals + mu))) / d)
                decrement = -grad @ step
                pn, wn, un = p + step[:ns], w + step[ns : ns + L], u + step[ns + L :]
                Dn, yn, cn, lon, hin = parts(pn, wn, un)
                fn = barrier(t, pn, yn, un, cn, lon, hin)
                if fn <= f - 0.01 * decrement:
                    mu = max(mu / 10.0, 1e-12)
                    break
                mu *= 10.0
            else:
                break
            p, w, u, D, y, c, lo, hi, f = pn, wn, un, Dn, yn, cn, lon, hin, fn
    out = pi.copy()
    out[support] = p
    out /= out.sum()
    return out, w


def _refined_candidates(P, pi, omega, pen, lambda0, C):
    """The joint refinement and its copy with near-zero penalized entries snapped to 0."""
    ref_pi, ref_omega = _joint_refine(P, pi, omega, pen, lambda0, C)
    snapped = ref_omega.copy()
    small = (np.abs(snapped) < 1e-8) & (pen.weights() > 0)
    snapped[small] = 0.0
    yield ref_pi, ref_omega
    if small.any() and (1.0 + C @ snapped).min() > 0:
        yield ref_pi, snapped


def fit_cash(data: Dataset, cfg: CashConfig | None = None, *, freeze_omega: bool = False) -> CashFit:
    """Alternate pi- and omega-steps until the penalized objective settles.

    With ``freeze_omega`` the noise stays standard normal, which is the
    ordinary independent-noise fit.
    """
    cfg = cfg or CashConfig()
    if len(data) < MIN_OBSERVATIONS:
        raise ValueError(f"need at least {MIN_OBSERVATIONS} observations, got {len(data)}")
    sigma_grid = np.asarray(cfg.sigma_grid if cfg.sigma_grid is not None else default_sigma_grid(data))
    pen, lam = cfg.pen, cfg.lambda0
    P = likelihood_tables(data, sigma_grid, pen.L)

    def objective(pi, w):
        return penalized_objective(pi, w, P, lam, pen)

    omega = np.zeros(pen.L)
    pi = _solve_pi(component_densities(P, omega), lam)
    current = objective(pi, omega)
    trace = [current]
    converged = freeze_omega
    C = grid_rows(cfg.grid, pen.L)
    if not freeze_omega:
        for _ in range(cfg.max_outer_iters):
            step = _omega_step(P, pi, pen, cfg.grid, omega,
                               lambda w: objective(pi, w))
            if step.objective is not None and objective(pi, step.omega) >= current:
                omega = step.omega
            new_pi = _solve_pi(component_densities(P, omega), lam, pi)
            if objective(new_pi, omega) >= objective(pi, omega):
                pi = new_pi
            new = objective(pi, omega)
            for cand_pi, cand_omega in _refined_candidates(P, pi, omega, pen, lam, C):
                val = objective(cand_pi, cand_omega)
                if val > new:
                    pi, omega, new = cand_pi, cand_omega, val
            trace.append(new)
            change = abs(new - current) / max(abs(current), 1.0)
            current = new
            if change < cfg.outer_tol:
                converged = True
                break
        if not converged:
            log.warning("fit_cash stopped after %d outer iterations without converging",
                        cfg.max_outer_iters)
    return CashFit(MixturePrior(sigma_grid, pi), omega, P, trace, converged, cfg, current)


def fixed_fit(prior: MixturePrior, omega, data: Dataset, trace=(), converged: bool = True) -> CashFit:
    """Wrap given (pi, omega) as a fit on ``data``, e.g. to reload a saved fit."""
    omega = np.asarray(omega, dtype=float)
    cfg = CashConfig(pen=EcnPenalty(L=len(omega)), sigma_grid=tuple(prior.sigma_grid))
    P = likelihood_tables(data, prior.sigma_grid, len(omega))
    trace = list(trace)
    return CashFit(prior, omega, P, trace, converged, cfg, trace[-1] if trace else float("nan"))


def fitted_noise_sd(fit_or_omega) -> float:
    """Root second moment sqrt(1 + sqrt(2) omega_2) of the fitted noise density."""
    omega = getattr(fit_or_omega, "omega", fit_or_omega)
    omega = np.asarray(omega, dtype=float)
    m2 = 1.0 + SQRT2 * (omega[1] if omega.size > 1 else 0.0)
    if m2 < 0:
        log.warning("fitted noise has negative second moment %g", m2)
        return float("nan")
    return math.sqrt(m2)
