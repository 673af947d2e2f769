"""Logistic regression for pooled case-control studies by nonparametric profile likelihood."""

from .baselines import BaselineFit, known_density_fit, prospective_fit
from .diagnostics import IdentifiabilityReport, identifiability_report
from .estimator import FitOptions, FitResult, covariance_estimate, fit, solve_theta, update_masses
from .model import (
    PooledData,
    StudyData,
    Theta,
    case_rates,
    logistic,
    profile_loglik,
    score_theta,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineFit",
    "FitOptions",
    "FitResult",
    "IdentifiabilityReport",
    "PooledData",
    "StudyData",
    "Theta",
    "case_rates",
    "covariance_estimate",
    "fit",
    "identifiability_report",
    "known_density_fit",
    "logistic",
    "profile_loglik",
    "prospective_fit",
    "score_theta",
    "solve_theta",
    "update_masses",
]
