"""Exception hierarchy used across the package."""


class LowRankError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LowRankError, ValueError):
    pass


class NotPositiveDefinite(LowRankError, ValueError):
    """Raised by the SPD factorization on a non-positive pivot.

    ``index`` is the 1-based row/column of the offending pivot in the
    original (unpermuted) numbering.
    """

    def __init__(self, index, message=None):
        self.index = int(index)
        super().__init__(message or f"matrix is not positive definite (pivot at index {self.index})")


class InvariantViolation(LowRankError, RuntimeError):
    pass


class IllConditionedPoint(LowRankError, ValueError):
    pass


class NearDegenerateSpectrum(LowRankError, ValueError):
    pass


class AnchorMismatch(LowRankError, ValueError):
    """Tangent vectors anchored at different points were combined."""


class SolverError(LowRankError, RuntimeError):
    """Solver failure carrying the last iterate and the partial history."""

    def __init__(self, message, point=None, record=None):
        super().__init__(message)
        self.point = point
        self.record = record


class LineSearchStalled(SolverError):
    pass


class TrustRegionStalled(SolverError):
    pass


class RankExhausted(SolverError):
    pass


class ConfigError(LowRankError, ValueError):
    pass
