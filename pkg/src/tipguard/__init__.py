"""Forecast multivariate IMU streams and flag tip-over-risk events."""

__version__ = "0.1.0"

from .errors import DataError, NumericError, TipguardError

__all__ = ["DataError", "NumericError", "TipguardError", "__version__"]
