"""Exception hierarchy shared across the package.

Every exception carries a short machine-readable ``reason`` code (stable,
snake_case) alongside the human-readable message, so command-line callers can
emit structured diagnostics and scripts can branch on the failure class.
"""

from __future__ import annotations


class HTLabError(Exception):
    """Base class for all package errors."""

    reason = "htlab_error"

    def __init__(self, message: str, reason: str | None = None):
        super().__init__(message)
        if reason is not None:
            self.reason = reason


class ModelValidationError(HTLabError):
    """A model ingredient violates its contract (shape, sign, balance)."""

    reason = "model_validation"


class DegenerateInputError(HTLabError):
    """Input is structurally unusable (empty, all-zero, absorbing)."""

    reason = "degenerate_input"


class PositivityError(HTLabError):
    """A quantity that must stay positive collapsed below threshold."""

    reason = "positivity"


class ConvergenceError(HTLabError):
    """An iterative scheme exhausted its budget before reaching tolerance."""

    reason = "convergence"

    def __init__(self, message: str, final_error: float | None = None,
                 iterations: int | None = None, reason: str | None = None):
        super().__init__(message, reason=reason)
        self.final_error = final_error
        self.iterations = iterations


class InconsistencyError(HTLabError):
    """Two quantities that must agree by construction failed to agree."""

    reason = "inconsistency"
