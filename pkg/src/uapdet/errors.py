"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class UapdetError(Exception):
    """Base class for errors raised by this package."""


class UsageError(UapdetError):
    """Bad arguments or an invalid configuration."""


class DataError(UapdetError):
    """Malformed or inconsistent input data (files, schemas, references)."""


class NumericalError(UapdetError):
    """Non-finite values where finite ones are required (NaN loss, bad gradient)."""
