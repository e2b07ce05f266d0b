"""Exception types shared across the package."""


class McbError(Exception):
    """Base class for all package-specific errors."""


class InvalidFilter(McbError):
    """Wavelet filter pair violates the orthonormal-filter invariants."""


class LengthNotDivisible(McbError):
    """Signal length is incompatible with the requested decomposition depth."""


class MissingApproximation(McbError):
    """Reconstruction requested but the coarsest scaling block was dropped."""


class ShapeMismatch(McbError):
    """Inputs disagree on node count, scale count, or sample count."""


class NonConvergence(McbError):
    """Continuous DAG solver failed to reach the acyclicity tolerance."""

    def __init__(self, message, h_value=None, iterations=None):
        super().__init__(message)
        self.h_value = h_value
        self.iterations = iterations


class NaNEncountered(McbError):
    """Non-finite values appeared in input data or solver state."""


class ZeroDiagonal(McbError):
    """Directed-spectrum aggregation received a tensor with a zero diagonal tube."""


class MismatchedSubjects(McbError):
    """The two acquisitions do not cover the same subject set."""


class ConfigError(McbError):
    """A run configuration field violates a module precondition."""
