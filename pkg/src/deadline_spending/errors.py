"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class PreconditionError(ValueError):
    """A structural precondition on the inputs does not hold."""


class UnsupportedError(NotImplementedError):
    """The requested operation is not available for this input family."""


class SolverError(RuntimeError):
    """Integration produced a grid that violates the value-function invariants."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class DegradedAccuracyWarning(UserWarning):
    """Independent evaluation routes disagree by more than their tolerance."""
