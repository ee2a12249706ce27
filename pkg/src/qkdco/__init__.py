"""Decoy-state QKD over shared DWDM fiber: link model, finite-key analysis,
photon Monte Carlo, parameter optimisation and CLI."""

__version__ = "0.1.0"

from .finite_key import FiniteKeyResult, ObservedCounts, secret_key_length  # noqa: E402
from .model import (ChannelConfig, ReceiverConfig, Scenario, SecurityParams, SourceConfig,  # noqa: E402
                    ValidationError, load_scenario, validate)
from .rates import RatePrediction, analytic_key, predict  # noqa: E402

__all__ = [
    "ChannelConfig", "FiniteKeyResult", "ObservedCounts", "RatePrediction", "ReceiverConfig",
    "Scenario", "SecurityParams", "SourceConfig", "ValidationError", "analytic_key",
    "load_scenario", "predict", "secret_key_length", "validate",
]
