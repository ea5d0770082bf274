"""Empirical Bayes normal-means shrinkage under exchangeable correlated noise."""

from .cash import CashConfig, CashFit, Dataset, MixturePrior, fit_cash, fitted_noise_sd, fixed_fit
from .ecn import ConstraintGrid, EcnFit, EcnPenalty, fit_ecn
from .posterior import PosteriorSummary, discovery_set, summarize

__version__ = "0.1.0"

__all__ = [
    "CashConfig",
    "CashFit",
    "ConstraintGrid",
    "Dataset",
    "EcnFit",
    "EcnPenalty",
    "MixturePrior",
    "PosteriorSummary",
    "discovery_set",
    "fit_cash",
    "fixed_fit",
    "fit_ecn",
    "fitted_noise_sd",
    "summarize",
]
