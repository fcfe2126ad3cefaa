"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or an ill-posed linear system."""


class ConvergenceError(NumericError):
    """An iterative procedure (fixed-point inversion, training) failed to converge."""
