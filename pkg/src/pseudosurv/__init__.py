"""Survival regression with jackknife pseudo-observations.

Converts right-censored data into pseudo-observations of the survival
function, then estimates log hazard ratios by GEE, frequentist GMM, and
Bayesian GMM, with Cox and Bayesian piecewise-exponential benchmarks and
a Monte Carlo harness for operating characteristics.
"""

from .bayes import BayesGmmFit, PriorSpec, PseudoLikelihood, fit_bayes_gmm, starting_values
from .bench import PemFit, PemModel, PemSpec, fit_cox, fit_pem
from .design import DesignMatrix, build_design, cloglog, cloglog_inv, mean_and_derivative
from .gee import FitResult, WorkingCorrelation, fit_gee, wald_interval
from .gmm import BasisSet, ScoreState, fit_gmm, qif, score_vector
from .mcmc import (
    PosteriorDraws,
    PosteriorSummary,
    SamplerConfig,
    TargetDensity,
    bulk_ess,
    sample,
    split_rhat,
    summarize,
)
from .pseudo import PseudoObsMatrix, pseudo_observations, pseudo_observations_bruteforce
from .sim import (
    MetricsRow,
    RunOptions,
    Scenario,
    calibrate_censoring,
    generate_trial,
    run_scenario,
    sensitivity_grid,
    true_mean_coefficients,
)
from .survival import (
    KaplanMeierCurve,
    SurvivalDataset,
    TimeGrid,
    kaplan_meier,
    select_time_grid,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "BayesGmmFit",
    "DesignMatrix",
    "FitResult",
    "KaplanMeierCurve",
    "MetricsRow",
    "PemFit",
    "PemModel",
    "PemSpec",
    "PosteriorDraws",
    "PosteriorSummary",
    "PriorSpec",
    "PseudoLikelihood",
    "PseudoObsMatrix",
    "RunOptions",
    "SamplerConfig",
    "Scenario",
    "ScoreState",
    "SurvivalDataset",
    "TargetDensity",
    "TimeGrid",
    "WorkingCorrelation",
    "bulk_ess",
    "build_design",
    "calibrate_censoring",
    "cloglog",
    "cloglog_inv",
    "fit_bayes_gmm",
    "fit_cox",
    "fit_gee",
    "fit_gmm",
    "fit_pem",
    "generate_trial",
    "kaplan_meier",
    "mean_and_derivative",
    "pseudo_observations",
    "pseudo_observations_bruteforce",
    "qif",
    "run_scenario",
    "sample",
    "score_vector",
    "select_time_grid",
    "sensitivity_grid",
    "split_rhat",
    "starting_values",
    "summarize",
    "true_mean_coefficients",
    "wald_interval",
]
