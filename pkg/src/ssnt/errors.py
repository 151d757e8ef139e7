"""Exception types shared across the toolkit."""


class SsntError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SsntError):
    """Tensor dimensions do not conform."""


class NumericError(SsntError):
    """A value that must be finite is NaN or infinite."""


class ConfigError(SsntError):
    """Invalid configuration value or inconsistent model combination."""


class DataError(SsntError):
    """Malformed corpus, vocabulary, or checkpoint content."""


class ContractError(SsntError):
    """An internal API contract was violated (caller bug)."""


class TrainingDiverged(SsntError):
    """Training produced a non-finite loss. Carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
