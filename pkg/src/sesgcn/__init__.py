"""Separable and sparse graph-convolutional human pose forecasting with collision checks."""

from .errors import (
    ConfigError,
    ContractViolation,
    EmptyCorpusError,
    EmptyGradientError,
    EmptyReportError,
    NumericFault,
    ParseError,
    SchemaError,
    SesGcnError,
    TrainingDiverged,
)

__version__ = "0.1.0"
