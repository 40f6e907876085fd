"""Exception hierarchy shared by every cardionet module."""


class CardioNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CardioNetError, ValueError):
    """Tensor or image extents do not agree with what an operation needs."""


class ConfigError(CardioNetError, ValueError):
    """A configuration value is out of range or inconsistent."""


class StateError(CardioNetError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NumericError(CardioNetError, ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class DomainError(CardioNetError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class UndefinedMetricError(CardioNetError, ZeroDivisionError):
    """A diagnostic metric has a zero denominator."""


class EmptyInputError(CardioNetError, ValueError):
    """An operation received an empty collection it cannot work with."""


# dataset
class SchemaError(CardioNetError, ValueError):
    """A CSV file lacks required columns."""


class RowError(CardioNetError, ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, message, line=None, source=None):
        where = ": ".join(str(x) for x in (source, None if line is None else f"line {line}") if x)
        super().__init__(f"{where}: {message}" if where else message)
        self.message, self.line, self.source = message, line, source


class EmptyClassError(CardioNetError, ValueError):
    """Case selection produced no records for one of the classes."""


class StratificationError(CardioNetError, ValueError):
    """A class has too few records to stratify a split."""


class MissingDataError(CardioNetError, LookupError):
    """A preprocessed tensor is missing for a record."""

    def __init__(self, image_id):
        super().__init__(f"no tensor blob for image {image_id!r}")
        self.image_id = image_id


# imaging
class DecodeError(CardioNetError, ValueError):
    """A PNG stream is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedFormatError(CardioNetError, ValueError):
    """A well-formed PNG uses a layout this decoder does not handle."""


# checkpoints
class CheckpointError(CardioNetError, ValueError):
    """Base class for checkpoint loading failures."""


class NotACheckpointError(CheckpointError):
    def __init__(self, message="not a checkpoint"):
        super().__init__(message)


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass
