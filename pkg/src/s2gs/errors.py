"""Exception hierarchy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, CausalityError -> 3,
DataError -> 4.
"""


class S2GSError(Exception):
    """Base class for all package errors."""


class DimensionError(S2GSError):
    """Array shapes do not satisfy an operation's contract."""


class ContractError(S2GSError):
    """A documented precondition was violated by the caller."""


class DegenerateRowError(ContractError):
    """A softmax row had every entry masked out."""


class CausalityError(S2GSError):
    """An operation would read or rewrite the past out of order."""


class ConfigError(S2GSError):
    """Invalid configuration value or file."""


class DataError(S2GSError):
    """Malformed external data (files, checkpoints, datasets)."""


class VocabularyError(DataError):
    """Label not present in the retrieval vocabulary."""


class GenerationError(S2GSError):
    """Scene sampling could not satisfy placement constraints."""
