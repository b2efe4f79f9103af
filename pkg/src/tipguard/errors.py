"""Exception types mapped to CLI exit codes (data=3, numeric=4)."""


class TipguardError(Exception):
    """Base class for errors raised by this package."""


class DataError(TipguardError):
    """Malformed, missing, or insufficient input data."""


class NumericError(TipguardError):
    """Numerical failure (non-finite loss, divergent training)."""
