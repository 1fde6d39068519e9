"""Exception types shared across the package."""


class ReadmitError(Exception):
    """Base class for all package errors."""


class ValidationError(ReadmitError, ValueError):
    """Input data or configuration violates a documented contract."""


class ConvergenceError(ReadmitError, RuntimeError):
    """An iterative fit failed to converge.

    ``trace`` holds the per-iteration history (e.g. max |delta beta|).
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class SeparationError(ConvergenceError):
    """Logistic fit diverges because the classes are (quasi-)separable."""


class TrainingError(ReadmitError, RuntimeError):
    """Model training or evaluation could not proceed."""
