"""Error types raised across the BCRL toolkit.

Every error derives from ``BcrlError`` and from the builtin that best
describes it, so callers may catch either.
"""
from typing import Any, Dict, List, Optional


class BcrlError(Exception):
    """Base class for all toolkit errors."""


class InvalidDimensionError(BcrlError, ValueError):
    pass


class InvalidGammaError(BcrlError, ValueError):
    pass


class ConstructionError(BcrlError, RuntimeError):
    pass


class EmptySupportError(BcrlError, ValueError):
    pass


class ShapeMismatchError(BcrlError, ValueError):
    pass


class DatasetFormatError(BcrlError, ValueError):
    pass


class DatasetValidationError(BcrlError, ValueError):
    pass


class DegenerateDesignError(BcrlError, ValueError):
    pass


class LengthMismatchError(BcrlError, ValueError):
    pass


class CheckpointError(BcrlError, ValueError):
    pass


class AggregationError(BcrlError, ValueError):
    pass


class ConfigValidationError(BcrlError, ValueError):
    """Raised with every violation found in a config, not just the first."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


class NumericAbortError(BcrlError, FloatingPointError):
    """A loss became non-finite; ``trace`` holds the rows recorded so far."""

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None):
        self.trace = list(trace or [])
        super().__init__(message)


class MissingInputsError(BcrlError, FileNotFoundError):
    def __init__(self, missing: List[str]):
        self.missing = list(missing)
        super().__init__("missing inputs:\n" + "\n".join(f"  - {m}" for m in self.missing))


class DegenerateCovarianceWarning(UserWarning):
    """Feature covariance is singular; a pseudoinverse path was taken."""
