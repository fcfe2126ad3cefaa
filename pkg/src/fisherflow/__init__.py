"""Flow-matching behavioral policies refined by Fisher-metric trust-region transport maps."""

from .errors import ConvergenceError, NumericError

__all__ = ["ConvergenceError", "NumericError"]
__version__ = "0.1.0"
