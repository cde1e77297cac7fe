"""Exception hierarchy shared by every stage.

Library code raises these; only the command line maps them to exit codes.
"""


class EstimatesError(Exception):
    """Base class for all errors raised by this package."""


class PreconditionError(EstimatesError, ValueError):
    """An operation was called with inputs outside its documented domain."""


class ConfigError(EstimatesError, ValueError):
    """A config file is missing, unreadable or names an unknown key."""


class CacheError(EstimatesError, ValueError):
    """A weights cache does not match the requested grid, order or format."""


class NumericalFailure(EstimatesError, RuntimeError):
    """A computation produced a result that violates a certified property."""


class MonotonicityError(NumericalFailure):
    """Assembled matrix is not a monotone (M-matrix) discretization."""

    def __init__(self, row: int, value: float, reason: str):
        self.row = row
        self.value = value
        super().__init__(f"monotonicity violated at row {row}: {reason} ({value:.3e})")


class SingularSystemError(NumericalFailure):
    """Dense factorization hit an exactly zero pivot."""


class SolverResidualError(NumericalFailure):
    """Solution does not satisfy the discrete equation to tolerance."""


class BarrierError(NumericalFailure):
    """No exponent in the sweep produced a passing barrier certificate."""

    def __init__(self, slack_by_exponent: dict):
        self.slack_by_exponent = dict(slack_by_exponent)
        table = ", ".join(f"q={q:g}: {s:.3e}" for q, s in self.slack_by_exponent.items())
        super().__init__(f"no barrier certified; best slack per exponent: {table}")


class MaximumPrincipleError(NumericalFailure):
    """A nonnegative source produced a non-positive interior infimum."""
