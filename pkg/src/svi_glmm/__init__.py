"""Variational Bayes for Poisson and logistic generalized linear mixed
models: nonconjugate message passing, its stochastic natural-gradient
variant, and prior-likelihood conflict diagnostics."""

from .data_model import (
    ClusterData,
    ConvergenceWarning,
    DataError,
    Dataset,
    Family,
    ParametrizationKind,
    PriorSpec,
)
from .diagnostics import ConflictReport, MessagePair, diagnose_all, zscore_discrepancy
from .estimator import VariationalGLMM
from .ncvmp import FitConfig, FitResult, GlobalState, LocalState, NumericalError, fit_ncvmp
from .stochastic import fit_svi

__all__ = [
    "ClusterData",
    "ConflictReport",
    "ConvergenceWarning",
    "DataError",
    "Dataset",
    "Family",
    "FitConfig",
    "FitResult",
    "GlobalState",
    "LocalState",
    "MessagePair",
    "NumericalError",
    "ParametrizationKind",
    "PriorSpec",
    "VariationalGLMM",
    "diagnose_all",
    "fit_ncvmp",
    "fit_svi",
    "zscore_discrepancy",
]
