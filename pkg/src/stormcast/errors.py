"""Exception hierarchy shared by every stage of the pipeline.

Everything raised on purpose derives from StormcastError so the CLI can
separate expected failures (bad config, corrupt file) from genuine bugs.
"""


class StormcastError(Exception):
    """Base class for all deliberate failures."""


class ConfigError(StormcastError):
    """Invalid or inconsistent configuration values."""


class DataError(StormcastError):
    """Input data violates a documented precondition."""


class InsufficientHistoryError(DataError):
    """An operation needed more frames than the sequence provides."""


class DimensionError(StormcastError):
    """Array shapes incompatible with the requested operation."""


class UsageError(StormcastError):
    """An API was called out of order or with a nonsensical request."""


class DivergenceError(StormcastError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}"
        )


class FormatError(StormcastError):
    """A binary artifact is malformed. Carries the offending byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
