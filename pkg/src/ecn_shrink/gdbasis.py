"""Gaussian-derivative basis kernels.

Probabilists' Hermite polynomials, derivatives of the standard normal
density, and the closed-form Gaussian convolutions used by the likelihood
and posterior code.  All functions broadcast over numpy arrays.

Order ``l = -1`` follows the antiderivative convention: ``phi^(-1) = Phi``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import comb, ndtr

L_MAX = 12

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_FACT = np.array([float(math.factorial(n)) for n in range(171)])
_SQRT_FACT = np.sqrt(_FACT)


def sqrt_factorial(l):
    return _SQRT_FACT[l]


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def hermite(l: int, x):
    """h_l(x) via h_{l+1} = x h_l - l h_{l-1}."""
    if l < 0:
        raise ValueError(f"Hermite order must be nonnegative, got {l}")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if l == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = x.copy()
    for k in range(1, l):
        h_prev, h = h, x * h - k * h_prev
    return h if h.ndim else float(h)


def hermite_table(L: int, x) -> np.ndarray:
    """Stack h_0(x), ..., h_L(x) along a new trailing axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (L + 1,))
    out[..., 0] = 1.0
    if L >= 1:
        out[..., 1] = x
    for k in range(1, L):
        out[..., k + 1] = x * out[..., k] - k * out[..., k - 1]
    return out


def phi_deriv(l: int, x):
    """l-th derivative of the standard normal density; l = -1 gives Phi."""
    if l < -1:
        raise ValueError(f"derivative order must be >= -1, got {l}")
    x = np.asarray(x, dtype=float)
    if l == -1:
        out = ndtr(x)
    else:
        out = (-1.0) ** l * hermite(l, x) * normal_pdf(x)
    return out if np.ndim(out) else float(out)


def std_phi_deriv(l: int, x):
    """Standardized derivative phi^(l)(x) / sqrt(l!)."""
    if l < 0:
        raise ValueError(f"standardized derivative order must be >= 0, got {l}")
    return phi_deriv(l, x) / _SQRT_FACT[l]


def std_phi_deriv_table(L: int, x) -> np.ndarray:
    """Trailing axis holds phi^(l)(x)/sqrt(l!) for l = 0..L."""
    x = np.asarray(x, dtype=float)
    signs = (-1.0) ** np.arange(L + 1)
    return hermite_table(L, x) * (signs / _SQRT_FACT[: L + 1]) * normal_pdf(x)[..., None]


def _check_scales(s, sigma, *, strict_sigma=False):
    s = np.asarray(s, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(s > 0)):
        raise ValueError("noise scale s must be strictly positive")
    if strict_sigma:
        if np.any(~(sigma > 0)):
            raise ValueError("prior scale sigma must be strictly positive")
    elif np.any(~(sigma >= 0)):
        raise ValueError("prior scale sigma must be nonnegative")
    return s, sigma


def conv_p(x, s, sigma, l: int):
    """Convolution of N(0, sigma^2) with the scaled basis function of order l.

    Equals ``int N(t; 0, sigma^2) (1/s) phi^(l)((x - t)/s) / sqrt(l!) dt``.
    ``sigma = 0`` gives the point-mass limit ``(1/s) phi^(l)(x/s) / sqrt(l!)``.
    """
    s, sigma = _check_scales(s, sigma)
    x = np.asarray(x, dtype=float)
    c = np.sqrt(sigma * sigma + s * s)
    out = (s / c) ** l / c * std_phi_deriv(l, x / c)
    return out if np.ndim(out) else float(out)


def conv_m(x, s, sigma, l: int):
    """First-moment counterpart of :func:`conv_p`: ``int t N(t; 0, sigma^2) ... dt``."""
    s, sigma = _check_scales(s, sigma)
    x = np.asarray(x, dtype=float)
    c = np.sqrt(sigma * sigma + s * s)
    out = -((s / c) ** l) * sigma * sigma / (c * c) * phi_deriv(l + 1, x / c) / _SQRT_FACT[l]
    return out if np.ndim(out) else float(out)


def tail_tau(x, s, sigma, l: int):
    """Half-line version of :func:`conv_p`, integrating over t > 0 only.

    The l-th x-derivative of ``N(x; 0, c^2) Phi(x sigma / (s c))`` expanded by
    the Leibniz rule, with ``c^2 = sigma^2 + s^2``.
    """
    s, sigma = _check_scales(s, sigma, strict_sigma=True)
    x = np.asarray(x, dtype=float)
    c = np.sqrt(sigma * sigma + s * s)
    u = x / c
    v = x * sigma / (s * c)
    total = np.zeros(np.broadcast(x, s, sigma).shape)
    for m in range(l + 1):
        # s^l (sigma/s)^m / c^(l+1), regrouped to avoid overflow of (sigma/s)^m
        scale = (s / c) ** (l - m) * (sigma / c) ** m / c
        total = total + comb(l, m) * scale * phi_deriv(m - 1, v) * phi_deriv(l - m, u)
    out = total / _SQRT_FACT[l]
    return out if np.ndim(out) else float(out)


def conv_tables(x, s, sigma_grid, L: int):
    """Arrays of conv_p and conv_m over observations, prior scales and orders.

    Returns ``(P, M)`` with shape ``(n, K, L + 1)`` for ``n`` observations and
    ``K`` prior scales.
    """
    x = np.asarray(x, dtype=float)[:, None]
    s = np.asarray(s, dtype=float)[:, None]
    sigma = np.asarray(sigma_grid, dtype=float)[None, :]
    _check_scales(s, sigma)
    c = np.sqrt(sigma * sigma + s * s)
    u = x / c
    orders = np.arange(L + 2)
    herm = hermite_table(L + 1, u)
    # phi^(l)(u) for l = 0..L+1
    dphi = herm * (-1.0) ** orders * normal_pdf(u)[..., None]
    ratio = (s / c)[..., None] ** orders[: L + 1]
    inv_fact = 1.0 / _SQRT_FACT[: L + 1]
    P = ratio / c[..., None] * dphi[..., : L + 1] * inv_fact
    M = -ratio * (sigma * sigma / (c * c))[..., None] * dphi[..., 1:] * inv_fact
    return P, M


def tail_table(x, s, sigma_grid, L: int) -> np.ndarray:
    """tail_tau over observations x positive prior scales x orders, shape (n, K, L+1)."""
    x = np.asarray(x, dtype=float)[:, None]
    s = np.asarray(s, dtype=float)[:, None]
    sigma = np.asarray(sigma_grid, dtype=float)[None, :]
    _check_scales(s, sigma, strict_sigma=True)
    c = np.sqrt(sigma * sigma + s * s)
    u = x / c
    v = x * sigma / (s * c)
    dphi_u = hermite_table(L, u) * (-1.0) ** np.arange(L + 1) * normal_pdf(u)[..., None]
    # phi^(m-1)(v) for m = 0..L
    dphi_v = np.empty(v.shape + (L + 1,))
    dphi_v[..., 0] = ndtr(v)
    if L >= 1:
        dphi_v[..., 1:] = hermite_table(L - 1, v) * (-1.0) ** np.arange(L) * normal_pdf(v)[..., None]
    a = (s / c)[..., None]
    b = (sigma / c)[..., None]
    out = np.zeros(u.shape + (L + 1,))
    for l in range(L + 1):
        m = np.arange(l + 1)
        terms = comb(l, m) * a ** (l - m) * b ** m * dphi_v[..., m] * dphi_u[..., l - m]
        out[..., l] = terms.sum(axis=-1) / c / _SQRT_FACT[l]
    return out


def hermite_moment(l: int, mu: float, var: float) -> float:
    """M_l(mu, var) = sum_k C(l, 2k) mu^(l-2k) var^k (2k-1)!!.

    ``var`` may be negative; the formula is the polynomial continuation.
    """
    total = 0.0
    for k in range(l // 2 + 1):
        dfact = math.prod(range(2 * k - 1, 0, -2)) if k else 1
        total += math.comb(l, 2 * k) * mu ** (l - 2 * k) * var**k * dfact
    return total


def gaussian_decomposition(mu: float, sigma2: float, L: int) -> np.ndarray:
    """Coefficients w_1..w_L expanding the N(mu, sigma2) density in the basis.

    The expansion converges only when sigma2 <= 2; larger variances raise.
    """
    if not sigma2 > 0:
        raise ValueError(f"variance must be positive, got {sigma2}")
    if sigma2 > 2:
        raise ValueError(
            f"N(mu, {sigma2}) has no convergent expansion: variance must be <= 2"
        )
    return np.array(
        [(-1) ** l / _SQRT_FACT[l] * hermite_moment(l, mu, sigma2 - 1.0) for l in range(1, L + 1)]
    )


def point_mass_coefficients(z: float, L: int) -> np.ndarray:
    """Coefficients w_1..w_L of the expansion of a point mass at z."""
    if not np.isfinite(z):
        raise ValueError("z must be finite")
    h = hermite_table(L, float(z))
    return np.array([(-1) ** l * h[l] / _SQRT_FACT[l] for l in range(1, L + 1)])


def expansion_density(omega, x):
    """phi(x) + sum_l omega_l phi^(l)(x)/sqrt(l!), with omega indexed from l = 1."""
    omega = np.asarray(omega, dtype=float)
    table = std_phi_deriv_table(len(omega), x)
    return table[..., 0] + table[..., 1:] @ omega


def ecdf_covariance(x, y, rho_moments, p: int):
    """cov(F_p(x), F_p(y)) for the ECDF of p correlated N(0, 1) variables.

    ``rho_moments[l - 1]`` is the mean of the l-th power of the pairwise
    correlations; the sum over orders is truncated at ``len(rho_moments)``.
    """
    if p < 2:
        raise ValueError("p must be at least 2")
    rho_moments = np.asarray(rho_moments, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    corr = np.zeros(np.broadcast(x, y).shape)
    for l, rbar in enumerate(rho_moments, start=1):
        corr = corr + rbar * phi_deriv(l - 1, x) * phi_deriv(l - 1, y) / _FACT[l]
    indep = ndtr(np.minimum(x, y)) - ndtr(x) * ndtr(y)
    out = (1.0 - 1.0 / p) * corr + indep / p
    return out if np.ndim(out) else float(out)


def bivariate_cdf_series(x, y, rho: float, L: int):
    """P(Z1 <= x, Z2 <= y) for a standard bivariate normal, truncated at order L."""
    total = ndtr(np.asarray(x, dtype=float)) * ndtr(np.asarray(y, dtype=float))
    for l in range(1, L + 1):
        total = total + rho**l * phi_deriv(l - 1, x) * phi_deriv(l - 1, y) / _FACT[l]
    return total if np.ndim(total) else float(total)
