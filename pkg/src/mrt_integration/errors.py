"""Exception and warning types raised across the package."""

from __future__ import annotations


class MRTError(Exception):
    """Base class for every error raised by this package."""


# --- data validation -------------------------------------------------------


class ValidationError(MRTError):
    """The dataset violates a structural requirement."""

    def __init__(self, message: str, *, participant=None, row: int | None = None):
        super().__init__(message)
        self.participant = participant
        self.row = row


class PositivityViolation(ValidationError):
    pass


class NonMonotoneTime(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyInternalStudy(ValidationError):
    pass


class EmptyExternalStudy(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    """A feature term references a covariate column that does not exist."""


class ParseError(MRTError, ValueError):
    """Malformed textual input (CSV cells, feature formulas, config files)."""

    def __init__(self, message: str, *, line: int | None = None, column=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full)
        self.line = line
        self.column = column


class ConfigError(ParseError):
    pass


# --- estimation ------------------------------------------------------------


class EstimationError(MRTError):
    pass


class NonConvergence(EstimationError):
    pass


class SingularNormalEquations(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


class Separation(EstimationError):
    """Maximum-likelihood estimate does not exist (perfect prediction)."""


class RankDeficient(EstimationError):
    pass


class NotPositiveDefinite(EstimationError):
    pass


class UnobservedLevel(EstimationError):
    pass


class PreconditionError(EstimationError):
    pass


class ReplicationFailure(MRTError):
    """Too many Monte Carlo replications failed."""

    def __init__(self, message: str, *, failed: int, total: int):
        super().__init__(message)
        self.failed = failed
        self.total = total


# --- warnings --------------------------------------------------------------


class ExtremeWeightsWarning(UserWarning):
    """Density-ratio weights suggest poor overlap between studies."""


class WeightClampWarning(UserWarning):
    """A density-ratio linear predictor was clamped to avoid overflow."""
