"""Exception types shared across the package."""


class EbmReplayError(Exception):
    """Base class for all package errors."""


class ContractError(EbmReplayError):
    """A caller violated an operation's precondition (shape, domain, emptiness)."""


class NumericError(EbmReplayError):
    """A computation produced or encountered non-finite values."""


class DataFormatError(EbmReplayError):
    """A dataset, vocabulary, or checkpoint file is malformed."""


class ConfigError(EbmReplayError):
    """An invalid or inconsistent run configuration."""
