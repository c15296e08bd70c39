"""Shared exception types.

Two broad classes matter to callers (and to the command line tool's exit
codes): problems with user input (bad files, bad roles, bad model specs)
and problems that arise while computing (numerical aborts, corrupt state).
"""

__all__ = ["ValidationError", "NumericError"]


class ValidationError(ValueError):
    """Invalid user input: data files, column roles, model specs, arguments."""


class NumericError(RuntimeError):
    """Runtime numerical failure: non-finite log density, corrupt store, ..."""
