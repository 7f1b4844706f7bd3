"""Exception taxonomy shared across the toolkit.

The CLI maps these onto process exit codes, so the split matters:
bad or inconsistent *inputs* raise DataError, failures that arise
*during computation* (degenerate denominators, non-finite results)
raise NumericError.
"""


class LoraGraftError(Exception):
    """Base class for all toolkit errors."""


class DataError(LoraGraftError):
    """Malformed, missing, or mutually inconsistent input data. Exit code 3."""


class NumericError(LoraGraftError):
    """A computation became degenerate or produced non-finite values. Exit code 4."""
