"""Posterior summaries under a fitted prior and noise density.

Every quantity is a ratio of closed-form convolutions, so no sampling or
numerical integration is involved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import gdbasis
from .cash import EPS_LIK, CashFit, Dataset, component_densities

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PosteriorSummary:
    post_mean: np.ndarray
    lfdr: np.ndarray
    qvalue: np.ndarray
    lfsr: np.ndarray
    svalue: np.ndarray
    n_floored: int = 0
    n_renormalized: int = 0


def _check(fit: CashFit, data: Dataset):
    if fit.p_matrix.shape[0] != len(data):
        raise ValueError(
            f"fit was computed on {fit.p_matrix.shape[0]} observations, data has {len(data)}"
        )


def _weighted_densities(fit: CashFit):
    """Per-component marginal densities (negative leakage floored at 0) and their mix."""
    dens = np.maximum(component_densities(fit.p_matrix, fit.omega), 0.0)
    weighted = dens * fit.prior.pi
    total = weighted.sum(axis=1)
    floored = total < EPS_LIK
    if floored.any():
        log.warning("%d observation(s) with marginal density floored at %g",
                    int(floored.sum()), EPS_LIK)
    return dens, weighted, np.maximum(total, EPS_LIK), floored


def posterior_mean(fit: CashFit, data: Dataset) -> np.ndarray:
    _check(fit, data)
    _, M = gdbasis.conv_tables(data.x, data.s, fit.prior.all_scales, len(fit.omega))
    num = component_densities(M, fit.omega) @ fit.prior.pi
    _, _, total, _ = _weighted_densities(fit)
    return num / total


def lfdr(fit: CashFit, data: Dataset) -> np.ndarray:
    """Posterior probability that each effect is exactly zero."""
    _check(fit, data)
    _, weighted, total, _ = _weighted_densities(fit)
    return np.clip(weighted[:, 0] / total, 0.0, 1.0)


def fdr_of_set(lfdr_values, gamma_set) -> float:
    idx = np.asarray(list(gamma_set), dtype=int)
    if idx.size == 0:
        raise ValueError("FDR of an empty discovery set is undefined")
    return float(np.mean(np.asarray(lfdr_values, dtype=float)[idx]))


def q_values(local_rates) -> np.ndarray:
    """Mean of the local rates over {k : rate_k <= rate_j}, for each j.

    Shared by q-values (from lfdr) and s-values (from lfsr).
    """
    r = np.asarray(local_rates, dtype=float)
    if r.size == 0:
        return r.copy()
    srt = np.sort(r)
    cum = np.cumsum(srt) / np.arange(1, r.size + 1)
    count = np.searchsorted(srt, r, side="right")
    return cum[count - 1]


def sign_probabilities(fit: CashFit, data: Dataset):
    """(Pr(theta > 0), Pr(theta < 0), Pr(theta = 0)) for each observation.

    The negative side is the complement of the other two; when clamping it
    to [0, 1] moves more than 1e-8 of mass the row is renormalized and
    counted in ``PosteriorSummary.n_renormalized``.
    """
    return _sign_probabilities(fit, data)[:3]


def _sign_probabilities(fit, data):
    _check(fit, data)
    dens, weighted, total, _ = _weighted_densities(fit)
    T = gdbasis.tail_table(data.x, data.s, fit.prior.sigma_grid, len(fit.omega))
    tails = T[..., 0] + T[..., 1:] @ fit.omega
    tails = np.clip(tails, 0.0, dens[:, 1:])
    pos = (tails @ fit.prior.pi[1:]) / total
    zero = np.clip(weighted[:, 0] / total, 0.0, 1.0)
    pos = np.clip(pos, 0.0, 1.0)
    neg_raw = 1.0 - pos - zero
    neg = np.clip(neg_raw, 0.0, 1.0)
    moved = np.abs(neg - neg_raw) > 1e-8
    if moved.any():
        log.warning("renormalized sign probabilities for %d observation(s)", int(moved.sum()))
        s = pos + neg + zero
        pos, neg, zero = pos / s, neg / s, zero / s
    return pos, neg, zero, int(moved.sum())


def lfsr_s_values(prob_positive, prob_negative, prob_zero):
    """Local false sign rates and their cumulative-mean s-values."""
    pos = np.asarray(prob_positive, dtype=float)
    neg = np.asarray(prob_negative, dtype=float)
    zero = np.asarray(prob_zero, dtype=float)
    lfsr = np.clip(np.minimum(zero + neg, zero + pos), 0.0, 1.0)
    return lfsr, q_values(lfsr)


def summarize(fit: CashFit, data: Dataset) -> PosteriorSummary:
    floored = _weighted_densities(fit)[3]
    lf = lfdr(fit, data)
    pos, neg, zero, n_renorm = _sign_probabilities(fit, data)
    lfsr, sv = lfsr_s_values(pos, neg, zero)
    return PosteriorSummary(
        post_mean=posterior_mean(fit, data),
        lfdr=lf,
        qvalue=q_values(lf),
        lfsr=lfsr,
        svalue=sv,
        n_floored=int(floored.sum()),
        n_renormalized=n_renorm,
    )


def discovery_set(summary: PosteriorSummary, level: float = 0.1, criterion: str = "qvalue") -> np.ndarray:
    """Indices whose q-value (or s-value) is at most ``level``."""
    if criterion not in ("qvalue", "svalue"):
        raise ValueError(f"criterion must be 'qvalue' or 'svalue', got {criterion!r}")
    values = getattr(summary, criterion)
    return np.flatnonzero(values <= level)
