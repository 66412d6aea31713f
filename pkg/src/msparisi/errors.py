"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2,
NumericalError -> 3, ConvexityError -> 4.
"""


class ValidationError(ValueError):
    """Input violates a structural invariant (bad model, pair, or config)."""


class NumericalError(RuntimeError):
    """A numerical routine could not produce a trustworthy result."""


class ConvexityError(RuntimeError):
    """Raised when an operation that requires a convex covariance is asked
    to run on a model that fails the convexity check."""


class MemoryGuardError(MemoryError):
    """Dense disorder storage would exceed the configured memory budget."""
