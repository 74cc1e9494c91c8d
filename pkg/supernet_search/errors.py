# supernet_search/errors.py
"""Exception hierarchy shared by every module of the package."""
from typing import Any, Dict, Optional


class SupernetSearchError(Exception):
    """Root of all errors raised by supernet_search."""


class DimensionError(SupernetSearchError, ValueError):
    pass


class AxisRangeError(DimensionError):
    pass


class UnsupportedKernelError(SupernetSearchError, ValueError):
    pass


class AlignmentError(SupernetSearchError, ValueError):
    pass


class WindowRangeError(SupernetSearchError, IndexError):
    pass


class LabelRangeError(SupernetSearchError, ValueError):
    pass


class StaleTapeError(SupernetSearchError, RuntimeError):
    pass


class NotReadyError(SupernetSearchError, RuntimeError):
    pass


class EvaluationError(SupernetSearchError, ArithmeticError):
    pass


class PreconditionError(SupernetSearchError, ValueError):
    pass


class ChoiceError(SupernetSearchError, IndexError):
    pass


class NormalizationError(SupernetSearchError, ValueError):
    pass


class ConfigurationError(SupernetSearchError, ValueError):
    pass


class UnknownPresetError(ConfigurationError):
    pass


class InvalidArchitectureError(SupernetSearchError, ValueError):
    pass


class FormatError(SupernetSearchError, ValueError):
    pass


class ConsistencyError(SupernetSearchError, ValueError):
    pass


class ValidationError(SupernetSearchError, ValueError):
    pass


class UndefinedSimilarityError(SupernetSearchError, ValueError):
    pass


class ResumeMismatchError(SupernetSearchError, RuntimeError):
    pass


class MixedSpaceError(SupernetSearchError, ValueError):
    pass


class DivergenceError(SupernetSearchError, ArithmeticError):
    """
    Raised when a training loss stops being finite.

    The diagnostic record (method, epoch, step, loss value, ...) travels with the
    exception so the caller can persist it before exiting.
    """

    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.record = dict(record or {})
