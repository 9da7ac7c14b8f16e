"""Exception types shared across the package."""


class VolterraControlError(Exception):
    """Base class for all library errors."""


class DomainError(VolterraControlError, ValueError):
    """An argument is outside the domain of the operation."""


class ApproximationError(VolterraControlError):
    """A requested approximation tolerance could not be met.

    Carries the best error that was achieved so callers can decide whether
    to retry with more resolution.
    """

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


class NumericError(VolterraControlError):
    """A numerical estimate failed to converge; message carries diagnostics."""


class ConditioningError(VolterraControlError):
    """An eigensystem is too ill-conditioned to trust (reduce n or perturb nodes)."""


class LinearSolveError(VolterraControlError):
    """A linear system required by the scheme is singular."""


class BlowUpError(VolterraControlError):
    """A simulated path left the admissible region (non-finite or huge state)."""

    def __init__(self, message: str, step_index: int):
        super().__init__(message)
        self.step_index = step_index


class ConfigError(VolterraControlError, ValueError):
    """An experiment configuration failed validation."""
