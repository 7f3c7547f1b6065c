"""
Exceptions raised by pvpASR.

Two families exist. Subclasses of :class:`ValueError` describe bad input,
configuration or violated preconditions (CLI exit code 1). Subclasses of
:class:`RuntimeError` describe failures that happen while computing
(CLI exit code 2).
"""


class PVPError(Exception):
    """Base class for all pvpASR errors."""


# --- usage / configuration -------------------------------------------------


class ConfigurationError(PVPError, ValueError):
    pass


class ShapeMismatchError(PVPError, ValueError):
    pass


class PrecisionMismatchError(PVPError, ValueError):
    pass


class SignalTooShortError(PVPError, ValueError):
    pass


class InfeasibleTargetError(PVPError, ValueError):
    pass


class EmptySplitError(PVPError, ValueError):
    pass


class CalibrationError(PVPError, ValueError):
    pass


class UnsupportedAudioError(PVPError, ValueError):
    pass


class MalformedAudioError(PVPError, ValueError):
    pass


class WeightFileError(PVPError, ValueError):
    pass


# --- runtime / numerical ---------------------------------------------------


class NumericalOverflowError(PVPError, RuntimeError):
    """Forward pass produced a non-finite value."""

    def __init__(self, message: str, precision=None):
        super().__init__(message)
        self.precision = precision


class DivergenceError(PVPError, RuntimeError):
    """Training loss became NaN or infinite."""

    def __init__(self, epoch: int, message: str = None):
        super().__init__(message or f"Training diverged at epoch {epoch}.")
        self.epoch = epoch


class TrainingError(PVPError, RuntimeError):
    """
    Training finished but did not reach the requested token error rate.

    Attributes:
        params (ModelParams): The trained parameters, so that callers may
            still persist them.
        token_error (float): Held-out token error rate that was reached.
    """

    def __init__(self, message: str, params=None, token_error: float = None):
        super().__init__(message)
        self.params = params
        self.token_error = token_error


USAGE_ERRORS = (ValueError, )
RUNTIME_ERRORS = (RuntimeError, ArithmeticError)
