"""Exception taxonomy shared by every stage.

InputError maps to CLI exit code 1, NumericError to exit code 2.
"""


class DuetError(Exception):
    """Base class for all package errors."""


class InputError(DuetError):
    """Bad caller input: shape mismatch, missing file, invalid config."""


class NumericError(DuetError):
    """Non-finite values or divergence during a numerical procedure."""
