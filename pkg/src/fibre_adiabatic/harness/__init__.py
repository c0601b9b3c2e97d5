"""Configuration, experiment orchestration, rate fitting and CSV output."""

from __future__ import annotations

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .rates import RateFit, RateFitError, fit_rate
from .report import SpectralReport

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RateFit",
    "RateFitError",
    "SpectralReport",
    "fit_rate",
    "load_config",
    "parse_config",
]
