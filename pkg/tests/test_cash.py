import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from ecn_shrink import gdbasis
from ecn_shrink.cash import (
    CashConfig,
    Dataset,
    MixturePrior,
    _solve_pi,
    component_densities,
    default_sigma_grid,
    fit_cash,
    fitted_noise_sd,
    fixed_fit,
    kkt_residual,
    likelihood_tables,
    marginal_loglik,
    omega_step,
    penalized_objective,
    pi_step,
)
from ecn_shrink.ecn import ConstraintGrid, EcnPenalty, fit_ecn, is_feasible
from ecn_shrink.rng import stream

import oracles

SQ2 = math.sqrt(2)


def three_point_data(seed, p, noise="iid"):
    """theta ~ 0.6 delta_0 + 0.3 N(0, 1) + 0.1 N(0, 9)."""
    rng = stream(seed, "three-point")
    u = rng.random(p)
    theta = np.where(u < 0.6, 0.0, np.where(u < 0.9, 1.0, 3.0) * rng.standard_normal(p))
    if noise == "iid":
        z = rng.standard_normal(p)
    else:
        z = math.sqrt(0.5) * rng.standard_normal() + math.sqrt(0.5) * rng.standard_normal(p)
    return theta, z


def test_dataset_validation():
    with pytest.raises(ValueError, match="differ"):
        Dataset([1, 2], [1])
    with pytest.raises(ValueError, match="positive"):
        Dataset([1, 2], [1, 0])
    with pytest.raises(ValueError, match="finite"):
        Dataset([1, np.inf], [1, 1])


def test_prior_validation():
    with pytest.raises(ValueError):
        MixturePrior([1.0, 0.5], [0.2, 0.4, 0.4])
    with pytest.raises(ValueError):
        MixturePrior([1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        MixturePrior([1.0], [1.0])
    prior = MixturePrior([1.0, 2.0], [0.2, 0.3, 0.5])
    assert prior.pi0 == 0.2
    assert prior.cdf(-1e-12) == pytest.approx(0.3 * 0.5 + 0.5 * 0.5)


def test_sigma_grid_ladder():
    x = np.linspace(-8, 8, 33)
    grid = default_sigma_grid(Dataset(x, np.ones_like(x)))
    target = 2 * math.sqrt(63)
    assert grid[0] == pytest.approx(0.1)
    np.testing.assert_allclose(grid[1:] / grid[:-1], SQ2)
    assert grid[-1] >= target > grid[-2]
    assert grid[-1] == pytest.approx(0.1 * SQ2**15)


def test_sigma_grid_fallback_and_single_point():
    x = np.linspace(-1, 1, 11)
    grid = default_sigma_grid(Dataset(x, np.ones_like(x)))
    assert grid[0] == pytest.approx(0.1) and grid[-1] >= 1 > grid[-2]
    grid = default_sigma_grid(Dataset([0.0], [2.0]))
    assert grid[0] == pytest.approx(0.2) and grid[-1] >= 2 > grid[-2]


def test_loglik_pure_null_is_normal_likelihood():
    rng = stream(0, "null-loglik")
    x, s = rng.normal(size=40), rng.uniform(0.5, 2, 40)
    prior = MixturePrior([0.5, 1.0], [1.0, 0.0, 0.0])
    got = marginal_loglik(prior, np.zeros(10), Dataset(x, s))
    assert got == pytest.approx(norm.logpdf(x, scale=s).sum(), rel=1e-12)


def test_loglik_independent_noise_matches_normal_mixture():
    rng = stream(1, "mix-loglik")
    x, s = rng.normal(scale=2, size=30), rng.uniform(0.5, 2, 30)
    sg = np.array([0.5, 1.0, 2.0])
    pi = rng.dirichlet(np.ones(4))
    expected = pi[0] * norm.pdf(x, scale=s)
    for w, sd in zip(pi[1:], sg):
        expected += w * norm.pdf(x, scale=np.hypot(s, sd))
    got = marginal_loglik(MixturePrior(sg, pi), np.zeros(10), Dataset(x, s))
    assert got == pytest.approx(np.log(expected).sum(), rel=1e-8)


def test_loglik_matches_per_observation_quadrature():
    rng = stream(2, "quad-loglik")
    x, s = rng.normal(scale=2, size=8), rng.uniform(0.5, 2, 8)
    sg = np.array([0.7, 1.8])
    pi = np.array([0.5, 0.3, 0.2])
    omega = 0.5 * gdbasis.gaussian_decomposition(0.0, 1.3, 10)
    data = Dataset(x, s)
    P = likelihood_tables(data, sg, 10)
    dens = component_densities(P, omega) @ pi
    for j in range(len(x)):
        marg, _, _ = oracles.posterior_integrals(x[j], s[j], pi, sg, omega)
        assert dens[j] == pytest.approx(marg, rel=1e-6)


def test_inflated_noise_loglik_is_truncated_gaussian_series():
    # the order-10 truncation of N(0, 1.5) is off by ~3e-3 in log density,
    # so compare with the truncated series and check the gap shrinks with L
    x = np.linspace(-3, 3, 25)
    data = Dataset(x, np.ones_like(x))
    prior = MixturePrior([1.0], [1.0, 0.0])
    gaps = []
    for L in (6, 8, 10, 12):
        omega = gdbasis.gaussian_decomposition(0.0, 1.5, L)
        P = likelihood_tables(data, prior.sigma_grid, L)
        per_obs = np.log(component_densities(P, omega) @ prior.pi)
        np.testing.assert_allclose(per_obs, np.log(oracles.noise_density(omega)(x)), rtol=1e-12)
        gaps.append(np.abs(per_obs - norm.logpdf(x, scale=math.sqrt(1.5))).max())
    assert np.all(np.diff(gaps) < 0)
    assert gaps[2] < 1e-2


def test_pi_step_with_identical_likelihoods():
    # sum_j log(pi0 + pi1) = 0 on the simplex, so only lambda0 log pi0 matters
    dens = np.ones((100, 2))
    pi = _solve_pi(dens, 10.0)
    res = minimize_scalar(lambda a: -(100 * math.log(1.0) + 10 * math.log(a)),
                          bounds=(1e-9, 1), method="bounded", options=dict(xatol=1e-12))
    assert pi[0] == pytest.approx(res.x, abs=1e-6)
    assert pi[0] == pytest.approx(1.0, abs=1e-6)


def test_pi_step_one_dimensional_oracle():
    rng = stream(3, "pi-1d")
    dens = rng.uniform(0.1, 1.0, size=(100, 2))
    lam = 10.0
    pi = _solve_pi(dens, lam)

    def neg(a):
        return -(np.log(dens @ [a, 1 - a]).sum() + lam * math.log(a))

    res = minimize_scalar(neg, bounds=(1e-12, 1 - 1e-12), method="bounded", options=dict(xatol=1e-12))
    assert pi[0] == pytest.approx(res.x, abs=1e-6)


def test_pi_step_null_dominates_without_penalty():
    dens = np.column_stack([np.full(100, 2.0), np.ones(100)])
    pi = _solve_pi(dens, 0.0)
    assert pi[0] == pytest.approx(1.0, abs=1e-8)


def test_pi_step_consistency_at_large_p():
    theta, z = three_point_data(4, 100_000)
    data = Dataset(theta + z, np.ones_like(z))
    prior = pi_step(data, np.zeros(10), [1.0, 3.0], lambda0=10.0)
    np.testing.assert_allclose(prior.pi, [0.6, 0.3, 0.1], atol=0.03)


def test_pi_step_kkt_and_perturbations():
    theta, z = three_point_data(5, 2000)
    data = Dataset(theta + z, np.ones_like(z))
    sg = default_sigma_grid(data)
    prior = pi_step(data, np.zeros(10), sg)
    dens = component_densities(likelihood_tables(data, sg, 10), np.zeros(10))
    assert kkt_residual(dens, prior.pi, 10.0) < 1e-8
    P = likelihood_tables(data, sg, 10)
    pen = EcnPenalty()
    best = penalized_objective(prior.pi, np.zeros(10), P, 10.0, pen)
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = rng.normal(size=prior.pi.size)
        d -= d.mean()
        cand = prior.pi + 1e-3 * d / np.linalg.norm(d)
        if cand.min() < 0:
            continue
        assert penalized_objective(cand, np.zeros(10), P, 10.0, pen) <= best + 1e-9 * len(z)


def test_null_penalty_monotone():
    theta, z = three_point_data(6, 1000)
    data = Dataset(theta + z, np.ones_like(z))
    sg = default_sigma_grid(data)
    pi0 = [pi_step(data, np.zeros(10), sg, lam).pi0 for lam in (0, 1, 10, 100, 1000)]
    assert np.all(np.diff(pi0) >= -1e-8)


def test_omega_step_point_mass_prior_reduces_to_fit_ecn():
    z = stream(7, "reduction").standard_normal(1000) * 1.2
    data = Dataset.from_z(z)
    prior = MixturePrior([1.0], [1.0, 0.0])
    step = omega_step(data, prior)
    direct = fit_ecn(z)
    np.testing.assert_allclose(step.omega, direct.omega, atol=1e-6)


def test_omega_step_stays_small_when_prior_explains_signal():
    theta, z = three_point_data(8, 5000)
    data = Dataset(theta + z, np.ones_like(z))
    prior = MixturePrior([1.0, 3.0], [0.6, 0.3, 0.1])
    step = omega_step(data, prior)
    assert np.max(np.abs(step.omega)) < 0.05


def test_omega_step_infeasible_init_restarts():
    theta, z = three_point_data(9, 500)
    data = Dataset(theta + z, np.ones_like(z))
    prior = MixturePrior([1.0, 3.0], [0.6, 0.3, 0.1])
    bad = np.zeros(10)
    bad[1] = -0.7
    a = omega_step(data, prior, init_omega=bad)
    b = omega_step(data, prior)
    np.testing.assert_allclose(a.omega, b.omega, atol=1e-6)
    assert is_feasible(a.omega, ConstraintGrid())


def test_omega_step_beats_perturbations():
    theta, z = three_point_data(10, 2000, noise="one_factor")
    data = Dataset(theta + z, np.ones_like(z))
    prior = MixturePrior([1.0, 3.0], [0.6, 0.3, 0.1])
    pen, grid = EcnPenalty(), ConstraintGrid()
    step = omega_step(data, prior, pen, grid)
    P = likelihood_tables(data, prior.sigma_grid, 10)
    best = penalized_objective(prior.pi, step.omega, P, 0.0, pen)
    rng = np.random.default_rng(1)
    for _ in range(200):
        d = rng.normal(size=10)
        cand = step.omega + 1e-3 * d / np.linalg.norm(d)
        if is_feasible(cand, grid):
            assert penalized_objective(prior.pi, cand, P, 0.0, pen) <= best + 1e-8 * len(z)


def test_p_matrix_scale_equivariance():
    rng = stream(11, "scale")
    x, s = rng.normal(scale=2, size=20), rng.uniform(0.5, 2, 20)
    sg = np.array([0.3, 1.0, 2.5])
    c = 3.7
    a = likelihood_tables(Dataset(x, s), sg, 10)
    b = likelihood_tables(Dataset(c * x, c * s), c * sg, 10)
    np.testing.assert_allclose(b, a / c, rtol=1e-10, atol=1e-300)


def test_fit_cash_rejects_small_p():
    with pytest.raises(ValueError, match="at least 50"):
        fit_cash(Dataset.from_z(np.zeros(49)))


def test_fit_cash_on_iid_noise():
    theta, z = three_point_data(12, 5000)
    data = Dataset(theta + z, np.ones_like(z))
    fit = fit_cash(data)
    base = fit_cash(data, freeze_omega=True)
    # the alternation starts from the independence fit and only climbs
    assert fit.trace[0] == pytest.approx(base.objective, rel=1e-12)
    assert fit.objective >= base.objective
    assert fit.converged
    assert np.all(np.diff(fit.trace) >= -1e-9)
    assert np.max(np.abs(fit.omega)) < 0.15
    assert fit.p_matrix.shape == (5000, fit.prior.pi.size, 11)
    assert abs(fit.prior.pi.sum() - 1) < 1e-12


def test_fit_cash_trace_is_nondecreasing_under_correlated_noise():
    for seed in (13, 14):
        theta, z = three_point_data(seed, 2000, noise="one_factor")
        fit = fit_cash(Dataset(theta + z, np.ones_like(z)))
        assert np.all(np.diff(fit.trace) >= -1e-9)
        assert fit.objective == pytest.approx(fit.trace[-1])


def test_freeze_omega_is_independence_fit():
    theta, z = three_point_data(15, 1000)
    data = Dataset(theta + z, np.ones_like(z))
    fit = fit_cash(data, freeze_omega=True)
    assert np.all(fit.omega == 0)
    direct = pi_step(data, np.zeros(10), fit.prior.sigma_grid)
    np.testing.assert_allclose(fit.prior.pi, direct.pi, atol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        CashConfig(lambda0=-1)
    with pytest.raises(ValueError):
        CashConfig(max_outer_iters=0)


def test_fitted_noise_sd_examples():
    assert fitted_noise_sd(np.zeros(10)) == 1
    w = np.zeros(10)
    w[1] = 1 / SQ2
    assert fitted_noise_sd(w) == pytest.approx(SQ2)
    w[1] = -1.0
    assert math.isnan(fitted_noise_sd(w))


def test_fitted_noise_sd_tracks_inflated_noise():
    for attempt in range(1000):
        theta, z = three_point_data(1000 + attempt, 10_000, noise="one_factor")
        realized = math.sqrt(np.mean(z * z))
        if 1.2 <= realized <= 1.4:
            break
    fit = fit_cash(Dataset(theta + z, np.ones_like(z)))
    assert fitted_noise_sd(fit) == pytest.approx(realized, rel=0.1)


def test_fixed_fit_wraps_given_parameters():
    x = np.linspace(-3, 3, 60)
    data = Dataset(x, np.ones_like(x))
    prior = MixturePrior([1.0, 2.0], [0.5, 0.25, 0.25])
    fit = fixed_fit(prior, np.zeros(4), data, trace=[1.0, 2.0])
    assert fit.objective == 2.0
    assert fit.p_matrix.shape == (60, 3, 5)
