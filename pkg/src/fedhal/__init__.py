"""Federated domain-generalization simulator with domain and feature hallucination."""

from fedhal.errors import (
    BatchCompositionError,
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    EvaluationError,
    FedHalError,
    LabelError,
    ParseError,
    ProtocolError,
    StaleUploadError,
    TrainingDivergenceError,
    UnsupportedVersionError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "BatchCompositionError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "DomainError",
    "EvaluationError",
    "FedHalError",
    "LabelError",
    "ParseError",
    "ProtocolError",
    "StaleUploadError",
    "TrainingDivergenceError",
    "UnsupportedVersionError",
    "UsageError",
]
