"""Decoupled performative risk: distribution maps, gradient estimators and retraining algorithms."""

from .core import (
    BaseDraw,
    CapabilityError,
    ContractError,
    DomainError,
    DPRiskError,
    Environment,
    NumericError,
    SampleBatch,
    SeedSpec,
    as_param,
    decoupled_risk,
    performative_risk,
)

__version__ = "0.1.0"

__all__ = [
    "BaseDraw",
    "CapabilityError",
    "ContractError",
    "DomainError",
    "DPRiskError",
    "Environment",
    "NumericError",
    "SampleBatch",
    "SeedSpec",
    "as_param",
    "decoupled_risk",
    "performative_risk",
]
