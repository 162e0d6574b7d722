"""Exception types shared across the package."""


class InvalidModelError(ValueError):
    """Model vector violates a precondition (non-finite, non-positive conductivity)."""


class FactorizationError(RuntimeError):
    """Sparse direct factorization failed (singular or non-SPD matrix)."""


class SolverBreakdown(RuntimeError):
    """Iterative solver hit a zero-curvature direction.

    The partial iterate is attached as ``.result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class StaleBasisError(RuntimeError):
    """A multiscale basis was applied at a model it was not built from."""


class ReducedSingularError(RuntimeError):
    """Projected operator stayed singular even after the diagonal shift."""
