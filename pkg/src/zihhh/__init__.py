"""Zero-inflated endemic-epidemic (HHH) models for multivariate count time series."""

__version__ = "0.1.0"

from .covariance import CovarianceSpec
from .data_model import SurveillanceData, ValidationReport, build_weights, validate
from .design import Component, ConfigurationError, ModelFormula, NumericError, assemble_design
from .distributions import zinb_logpmf, zinb_mean, zinb_sample, zinb_var
from .epidemiology import reproduction_number, reproduction_series
from .estimation import DataValidationError, FitOptions, FitResult, fit, wald_ci
from .forecasting import ForecastSet, aggregate, osa_forecast, pairwise_tests, permutation_test
from .presets import preset_formula
from .simulation import SimConfig, germany_config, simulate, simulation_study

__all__ = [
    "Component", "ConfigurationError", "CovarianceSpec", "DataValidationError", "FitOptions",
    "FitResult", "ForecastSet", "ModelFormula", "NumericError", "SimConfig",
    "SurveillanceData", "ValidationReport", "aggregate", "assemble_design", "build_weights",
    "fit", "germany_config", "osa_forecast", "pairwise_tests", "permutation_test",
    "preset_formula", "reproduction_number", "reproduction_series", "simulate",
    "simulation_study", "validate", "wald_ci", "zinb_logpmf", "zinb_mean", "zinb_sample",
    "zinb_var",
]
