"""Doubly robust vaccine-effectiveness estimation for test-negative designs."""

from .core import EstimatorOutput, FoldAssignment, TndDataset, TndRecord, split_folds, validate_dataset
from .dgp import DgpConfig, DiscreteDgp, enumerate_discrete, preset, simulate_tnd, truth_mrr_monte_carlo
from .estimators import ipw_mrr, outreg_mrr, tnddr_estimate
from .nuisance import LearnerSpec, NuisanceEstimates, estimate_nuisances, fit_l1_basis, fit_logistic

__version__ = "0.1.0"

__all__ = [
    "DgpConfig",
    "DiscreteDgp",
    "EstimatorOutput",
    "FoldAssignment",
    "LearnerSpec",
    "NuisanceEstimates",
    "TndDataset",
    "TndRecord",
    "enumerate_discrete",
    "estimate_nuisances",
    "fit_l1_basis",
    "fit_logistic",
    "ipw_mrr",
    "outreg_mrr",
    "preset",
    "simulate_tnd",
    "split_folds",
    "tnddr_estimate",
    "truth_mrr_monte_carlo",
    "validate_dataset",
]
