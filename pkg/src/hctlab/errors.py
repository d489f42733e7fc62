"""Exception types shared across the laboratory modules."""


class ConfigurationError(ValueError):
    """A run configuration violates a validity bound (stability, schedule...)."""


class ResolutionError(ValueError):
    """A feature is too fine for the grid (packet width below a few cells)."""


class LeakageError(ValueError):
    """Probability mass escapes the tracked region beyond the allowed budget."""


class DegenerateStateError(ValueError):
    """A state carries no cell above the occupation threshold."""


class TrackingError(RuntimeError):
    """Branch component bookkeeping became ambiguous; diagnostics attached."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CoverageError(RuntimeError):
    """A final-measure bin holds quantum mass but no landing trajectory."""


class StatisticsError(RuntimeError):
    """Too few valid samples to evaluate a statistical quantity."""
