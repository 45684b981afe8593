"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SesGcnError(Exception):
    """Base class for all package errors."""


class ContractViolation(SesGcnError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigError(SesGcnError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericFault(SesGcnError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class EmptyGradientError(SesGcnError, RuntimeError):
    """backward() was called on a value that is not connected to any parameter."""


class ParseError(SesGcnError, ValueError):
    """A file on disk could not be parsed."""


class SchemaError(SesGcnError, ValueError):
    """Files parsed fine but disagree with each other (joint counts, fps, ...)."""


class EmptyCorpusError(SesGcnError, ValueError):
    pass


class EmptyReportError(SesGcnError, ValueError):
    pass


class TrainingDiverged(SesGcnError, RuntimeError):
    """Loss became non-finite; carries a reference to the last good state."""

    def __init__(self, epoch: int, last_good_checkpoint: str | None):
        self.epoch = epoch
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(
            f"training diverged at epoch {epoch}; last good checkpoint: {last_good_checkpoint}"
        )
