"""Development-strength scores for communities on economic graphs.

Binary development labels plus an economic graph (entity-community
affiliations, typed entity social ties, community attributes) are turned
into continuous scores through a network equilibrium model, with optional
correction for selection bias in network formation.
"""

__version__ = "0.1.0"

from .equilibrium import (
    ScoreResult,
    StabilityReport,
    equilibrium_residual,
    solve_direct,
    solve_fixed_point,
    stability_check,
)
from .errors import (
    CapabilityError,
    ConstraintError,
    ConvergenceError,
    EconographError,
    EstimationError,
    NumericalError,
    ParseError,
    StabilityViolation,
    ValidationError,
)
from .estimation import FitConfig, FitResult, ModelParams, fit, gradient, label_likelihood, log_posterior
from .evaluation import IdmReport, baseline_lnp, baseline_logistic, combined_network, idm, top_order
from .graph import DerivedNetworks, EconomicGraph, derive_networks, spectral_radius
from .io import load_graph, read_scores, save_graph, save_scores
from .netform import (
    DyadicFormationTerm,
    FormationParams,
    JointConfig,
    RobustScoreResult,
    ergm_log_prob_exact,
    fit_joint,
    network_statistics,
    pair_cost,
    sample_network,
    utility,
)
from .synth import SynthConfig, SynthTruth, generate

__all__ = [
    "__version__",
    "CapabilityError", "ConstraintError", "ConvergenceError", "EconographError", "EstimationError",
    "NumericalError", "ParseError", "StabilityViolation", "ValidationError",
    "EconomicGraph", "DerivedNetworks", "derive_networks", "spectral_radius",
    "ScoreResult", "StabilityReport", "stability_check", "solve_direct", "solve_fixed_point",
    "equilibrium_residual",
    "ModelParams", "FitConfig", "FitResult", "fit", "log_posterior", "gradient", "label_likelihood",
    "FormationParams", "JointConfig", "RobustScoreResult", "DyadicFormationTerm", "fit_joint",
    "sample_network", "ergm_log_prob_exact", "network_statistics", "pair_cost", "utility",
    "SynthConfig", "SynthTruth", "generate",
    "IdmReport", "idm", "top_order", "baseline_logistic", "baseline_lnp", "combined_network",
    "load_graph", "save_graph", "save_scores", "read_scores",
]
