"""Exception types shared across the package."""


class MvbcfError(Exception):
    """Base class for all package-specific errors."""


class DecompositionError(MvbcfError):
    """A matrix that must be positive definite failed Cholesky factorization."""


class StandardizationError(MvbcfError):
    """An outcome passed to a sampler was not standardized (or is degenerate)."""


class OverlapError(MvbcfError):
    """A treatment indicator violates the overlap requirement (single class)."""


class SchemaError(MvbcfError):
    """Input data did not match the expected columns, shapes, or types."""
