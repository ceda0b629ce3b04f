"""Exception hierarchy shared by all modules.

Exit-code mapping lives in the CLI: ContractViolation/ConfigurationError -> 1,
DataIOError (and OSError) -> 2, GradCheckError -> 3.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigurationError(ContractViolation):
    """A configuration value is outside its allowed range."""


class DataIOError(IOError):
    """A file could not be read or written."""


class GradCheckError(AssertionError):
    """Analytic and finite-difference gradients disagree."""
