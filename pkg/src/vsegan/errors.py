"""Exception types shared across the package.

The CLI maps these onto exit codes (3 for contract violations, 4 for
integrity failures).
"""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, format)."""


class DegenerateStatisticsError(ContractViolation):
    """Batch normalisation asked to estimate statistics from a single value."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class IntegrityError(RuntimeError):
    """A persisted file failed its magic, version, length or checksum test."""
