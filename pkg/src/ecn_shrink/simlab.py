"""Seeded multiple-testing simulations with factor-model correlated noise.

Each replicate draws sparse effects, heteroskedastic standard deviations and
correlated N(0, 1) noise, then compares three discovery procedures at a
nominal FDR level: the correlated-noise fit, the same fit with the noise
frozen at N(0, 1), and Benjamini-Hochberg.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .cash import CashConfig, Dataset, fit_cash
from .posterior import discovery_set, summarize
from .rng import stream

log = logging.getLogger(__name__)

METHODS = ("cash", "ebnm_indep", "bh")

# (weight, mean, sd) of each non-null effect distribution
G1_COMPONENTS = {
    "Gaussian": ((1.0, 0.0, 2.0),),
    "NearGaussian": ((0.6, 0.0, 1.0), (0.4, 0.0, 3.0)),
    "Spiky": ((0.4, 0.0, 0.5), (0.2, 0.0, 2.0), (0.4, 0.0, 3.0)),
    "Skew": ((0.25, -2.0, 2.0), (0.25, -1.0, 2.0), (0.25, 0.0, 1.0), (0.25, 1.0, 1.0)),
    "FlatTop": ((0.5, -1.5, 1.5), (0.5, 1.5, 1.5)),
    "Bimodal": ((0.5, -1.5, 1.0), (0.5, 1.5, 1.0)),
}

NOISE_KINDS = ("iid", "one_factor", "equicorrelated", "k_factor", "pairs")


@dataclass(frozen=True)
class NoiseModel:
    """Marginally N(0, 1) noise: ``z_j = sum_t B_jt eta_t + sqrt(1 - sum_t B_jt^2) eps_j``.

    ``one_factor`` and ``equicorrelated`` load every observation on a single
    factor with loading sqrt(rho).  ``k_factor`` uses loading ``loadings[t]``
    on factor t, with an independent random sign per observation when
    ``random_signs`` is set.  ``pairs`` makes consecutive observations
    identical and independent across pairs.
    """

    kind: str = "iid"
    rho: float = 0.0
    loadings: tuple = ()
    random_signs: bool = True

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise model {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.kind in ("one_factor", "equicorrelated") and not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        if self.kind == "k_factor":
            if not self.loadings:
                raise ValueError("k_factor needs at least one loading")
            if sum(b * b for b in self.loadings) > 1:
                raise ValueError("squared loadings must sum to at most 1")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        d = dict(d)
        kind = d.pop("model", "iid")
        allowed = {"rho", "loadings", "random_signs"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown noise keys: {sorted(extra)}")
        if "loadings" in d:
            d["loadings"] = tuple(float(b) for b in d["loadings"])
        return cls(kind=kind, **d)

    def to_dict(self) -> dict:
        out = {"model": self.kind}
        if self.kind in ("one_factor", "equicorrelated"):
            out["rho"] = self.rho
        if self.kind == "k_factor":
            out["loadings"] = list(self.loadings)
            out["random_signs"] = self.random_signs
        return out


@dataclass(frozen=True)
class Scenario:
    g1_name: str = "Gaussian"
    pi0: float = 0.9
    p: int = 2000
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 1

    def __post_init__(self):
        if self.g1_name not in G1_COMPONENTS:
            raise ValueError(f"unknown g1 {self.g1_name!r}; expected one of {sorted(G1_COMPONENTS)}")
        # pi0 = 1 (no signals at all) is allowed as a degenerate check
        if not 0 < self.pi0 <= 1:
            raise ValueError("pi0 must lie in (0, 1]")
        if self.p < 100:
            raise ValueError("p must be at least 100")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class MethodOutcome:
    fdp: float = float("nan")
    tdp: float = float("nan")
    n_discoveries: int = 0
    runtime: float = 0.0
    error: str = ""


@dataclass
class ScenarioResult:
    replicate: int
    noise_sd: float
    n_signals: int
    methods: dict


def sample_effects(g1_name: str, pi0: float, p: int, rng: np.random.Generator) -> np.ndarray:
    """iid draws from pi0 * delta_0 + (1 - pi0) * g1."""
    comps = G1_COMPONENTS[g1_name]
    weights = np.array([c[0] for c in comps])
    nonnull = rng.random(p) >= pi0
    which = rng.choice(len(comps), size=p, p=weights)
    means = np.array([c[1] for c in comps])[which]
    sds = np.array([c[2] for c in comps])[which]
    theta = means + sds * rng.standard_normal(p)
    return np.where(nonnull, theta, 0.0)


def sample_correlated_noise(model: NoiseModel, p: int, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(p)
    if model.kind == "iid":
        return eps
    if model.kind in ("one_factor", "equicorrelated"):
        eta = rng.standard_normal()
        return math.sqrt(model.rho) * eta + math.sqrt(1.0 - model.rho) * eps
    if model.kind == "pairs":
        z = np.repeat(eps[: (p + 1) // 2], 2)[:p]
        return z
    b = np.asarray(model.loadings, dtype=float)
    eta = rng.standard_normal(b.size)
    signs = rng.choice([-1.0, 1.0], size=(p, b.size)) if model.random_signs else np.ones((p, b.size))
    B = signs * b
    return B @ eta + math.sqrt(max(0.0, 1.0 - float(b @ b))) * eps


def simulate_standard_deviations(p: int, rng: np.random.Generator, log_sd: float = 0.3) -> np.ndarray:
    """Log-normal standard deviations rescaled so that mean(s^2) == 1."""
    s = np.exp(log_sd * rng.standard_normal(p))
    return s / math.sqrt(np.mean(s * s))


def realized_noise_sd(z) -> float:
    """Root mean square of the noise draw, i.e. its spread around the N(0, 1) centre."""
    z = np.asarray(z, dtype=float)
    return float(math.sqrt(np.mean(z * z)))


def two_sided_pvalues(x, s) -> np.ndarray:
    return 2.0 * ndtr(-np.abs(np.asarray(x) / np.asarray(s)))


def bh_procedure(pvalues, level: float) -> np.ndarray:
    """Benjamini-Hochberg step-up; returns the rejected indices in ascending order."""
    pv = np.asarray(pvalues, dtype=float)
    n = pv.size
    if n == 0:
        return np.array([], dtype=int)
    order = np.argsort(pv, kind="stable")
    passed = np.flatnonzero(pv[order] <= level * np.arange(1, n + 1) / n)
    if passed.size == 0:
        return np.array([], dtype=int)
    return np.sort(order[: passed[-1] + 1])


def fdp_tdp(discoveries, theta) -> tuple[float, float]:
    theta = np.asarray(theta)
    disc = np.asarray(discoveries, dtype=int)
    false = int(np.count_nonzero(theta[disc] == 0))
    true = disc.size - false
    n_signals = int(np.count_nonzero(theta != 0))
    return false / max(disc.size, 1), true / max(n_signals, 1)


def simulate_replicate(scenario: Scenario, replicate: int = 0):
    """(theta, s, z, x) for one replicate; bit-identical for a given (scenario, replicate)."""
    seed = scenario.seed
    theta = sample_effects(scenario.g1_name, scenario.pi0, scenario.p,
                           stream(seed, "replicate", replicate, "effects"))
    s = simulate_standard_deviations(scenario.p, stream(seed, "replicate", replicate, "sd"))
    z = sample_correlated_noise(scenario.noise, scenario.p, stream(seed, "replicate", replicate, "noise"))
    return theta, s, z, theta + s * z


def _discoveries(method, data, level, cfg):
    if method == "bh":
        return bh_procedure(two_sided_pvalues(data.x, data.s), level)
    fit = fit_cash(data, cfg, freeze_omega=(method == "ebnm_indep"))
    return discovery_set(summarize(fit, data), level, "qvalue")


def run_scenario(scenario: Scenario, level: float = 0.1, replicate: int = 0,
                 cfg: CashConfig | None = None) -> ScenarioResult:
    theta, s, z, x = simulate_replicate(scenario, replicate)
    data = Dataset(x, s)
    outcomes = {}
    for method in METHODS:
        start = time.perf_counter()
        try:
            disc = _discoveries(method, data, level, cfg)
            fdp, tdp = fdp_tdp(disc, theta)
            outcomes[method] = MethodOutcome(fdp, tdp, int(disc.size), time.perf_counter() - start)
        except Exception as exc:  # one failing method must not sink the others
            log.warning("replicate %d: %s failed: %s", replicate, method, exc)
            outcomes[method] = MethodOutcome(runtime=time.perf_counter() - start,
                                             error=f"{type(exc).__name__}: {exc}")
    return ScenarioResult(replicate, realized_noise_sd(z), int(np.count_nonzero(theta)), outcomes)


def default_workers() -> int:
    raw = os.environ.get("ECN_SHRINK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ECN_SHRINK_THREADS must be an integer, got {raw!r}") from None


def _run_one(args):
    scenario, level, replicate, cfg = args
    return run_scenario(scenario, level, replicate, cfg)


def run_batch(scenario: Scenario, replicates: int, level: float = 0.1,
              cfg: CashConfig | None = None, workers: int | None = None) -> list[ScenarioResult]:
    """Run replicates 0..n-1; output order and values do not depend on ``workers``."""
    workers = default_workers() if workers is None else workers
    jobs = [(scenario, level, r, cfg) for r in range(replicates)]
    if workers <= 1 or replicates <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def summarize_batch(results: list[ScenarioResult], level: float = 0.1) -> dict:
    """Per-method FDP/TDP summaries; root-MSE is measured from ``level``."""
    if not results:
        raise ValueError("cannot summarize an empty batch")
    out = {}
    for method in results[0].methods:
        ok = [r.methods[method] for r in results if not r.methods[method].error]
        fdp = np.array([o.fdp for o in ok])
        tdp = np.array([o.tdp for o in ok])
        if fdp.size == 0:
            stats = dict(n=0, mean_fdp=np.nan, median_fdp=np.nan, fdp_p05=np.nan,
                         fdp_p95=np.nan, rmse_fdp=np.nan, mean_tdp=np.nan)
        else:
            stats = dict(
                n=int(fdp.size),
                mean_fdp=float(fdp.mean()),
                median_fdp=float(np.median(fdp)),
                fdp_p05=float(np.percentile(fdp, 5)),
                fdp_p95=float(np.percentile(fdp, 95)),
                rmse_fdp=float(math.sqrt(np.mean((fdp - level) ** 2))),
                mean_tdp=float(tdp.mean()),
            )
        stats["n_errors"] = len(results) - len(ok)
        out[method] = stats
    return out


def stratified_mean_fdp(results: list[ScenarioResult], method: str, n_strata: int = 3) -> list[float]:
    """Mean FDP of ``method`` within equal-size strata of realized noise SD (low to high)."""
    ok = sorted((r for r in results if not r.methods[method].error), key=lambda r: r.noise_sd)
    groups = np.array_split(np.arange(len(ok)), n_strata)
    return [float(np.mean([ok[i].methods[method].fdp for i in g])) if g.size else float("nan")
            for g in groups]
