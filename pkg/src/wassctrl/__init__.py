"""Adaptive-robust discrete-time stochastic control over shrinking Wasserstein
balls, with Gaussian-process value/policy surrogates and forward Monte Carlo
evaluation."""

from .ambiguity import AmbiguityRadius, bridge_functional, radius, simulate_bridge
from .empirical import (
    EmpiricalDistribution,
    FeatureVector,
    empirical_quantile,
    update_empirical,
    wasserstein1,
)
from .evaluate import EvaluationReport, forward_evaluate, report_stats, solve_sr, solve_tr
from .gp import ConstantSurrogate, GPFitConfig, GPFitError, GPSurrogate, fit, matern52
from .market import (
    AugmentedState,
    MarketParams,
    MixtureModel,
    sample_mixture,
    transition,
    utility,
    wealth_step,
)
from .solver import (
    ScalarSearchError,
    SolverConfig,
    StagePolicy,
    bellman_step,
    generate_design_points,
    inner_robust_value,
    moreau_envelope,
    scalar_minimize,
    solve,
    worst_case_value,
)

__version__ = "0.1.0"
