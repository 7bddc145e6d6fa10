"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TrinolocError(Exception):
    """Base class for all errors raised by trinoloc."""


class ValidationError(TrinolocError, ValueError):
    """An input violated a documented precondition.

    Attributes:
        field: Name of the offending field or argument, when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DegenerateVectorError(ValidationError):
    """A vector with zero norm was passed where a direction is required."""


class NoReferenceError(ValidationError):
    """Retrieval was attempted against an empty location library."""


class FrameError(TrinolocError):
    """Wraps a per-frame failure inside a sequence run."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"frame {index}: {cause}")
        self.index = index
        self.cause = cause


class TrainingDivergedError(TrinolocError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, pair_index: int | None, loss: float):
        where = f" (pair {pair_index})" if pair_index is not None else ""
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}{where}")
        self.iteration = iteration
        self.pair_index = pair_index
        self.loss = loss


# --- binary file formats -------------------------------------------------


class FormatError(TrinolocError):
    """Base class for problems reading one of the binary file formats."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    def __init__(self, found: int, expected: int, what: str = "file"):
        super().__init__(f"{what} format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class CorruptFileError(FormatError):
    """File is truncated or structurally inconsistent."""


class ChecksumError(FormatError):
    def __init__(self, stored: int, computed: int):
        super().__init__(f"CRC32 mismatch: stored {stored:#010x}, computed {computed:#010x}")
        self.stored = stored
        self.computed = computed


# --- manifest ingestion ---------------------------------------------------


class IngestionError(TrinolocError):
    """Base class for manifest ingestion failures.

    Attributes:
        record_index: Zero-based index of the manifest record (``None`` if the
            failure is not tied to a record).
    """

    def __init__(self, message: str, record_index: int | None = None):
        prefix = f"record {record_index}: " if record_index is not None else ""
        super().__init__(prefix + message)
        self.record_index = record_index


class MissingFileError(IngestionError):
    def __init__(self, path, record_index: int | None = None):
        super().__init__(f"missing file {path}", record_index)
        self.path = path


class MalformedRecordError(IngestionError):
    pass


class DuplicateIdError(IngestionError):
    def __init__(self, location_id: str, record_index: int | None = None):
        super().__init__(f"duplicate location id {location_id!r}", record_index)
        self.location_id = location_id


class FetchError(IngestionError):
    """A fetcher could not produce bytes for a URL or path."""
