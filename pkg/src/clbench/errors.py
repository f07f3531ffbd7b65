"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2,
ResumeMismatchError -> 4, anything else raised by the library -> 3.
"""


class CLBenchError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CLBenchError):
    """Bad input data or configuration, detected before any side effect."""


class ResumeMismatchError(CLBenchError):
    """A resumed run's configuration does not match what is on disk."""
