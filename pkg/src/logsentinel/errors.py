"""Exception types shared across the toolkit."""


class LogSentinelError(Exception):
    """Base class for all toolkit errors."""


class EmptyContentError(LogSentinelError):
    """A log line had no tokens left after header stripping and masking."""


class FormatError(LogSentinelError):
    """An artifact file is corrupt, truncated, or has the wrong version."""


class InsufficientNormalError(LogSentinelError):
    """Fewer normal sequences are available than the requested training size."""


class SequenceTooLongError(LogSentinelError):
    """Model input exceeds the configured maximum context length."""


class InvalidKeyIdError(LogSentinelError):
    """A key id is outside the model vocabulary."""


class VocabMismatchError(LogSentinelError):
    """Model vocabulary size does not match the corpus it is applied to."""


class NumericalError(LogSentinelError):
    """Training or scoring produced a non-finite value."""
