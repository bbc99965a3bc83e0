"""Exception hierarchy shared by every module.

The CLI maps each family onto a stable exit code, so new error types should
subclass one of the families below rather than ``RobustFSError`` directly.
"""


class RobustFSError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(RobustFSError):
    """Bad configuration or arguments (exit code 1)."""


class ConfigError(UsageError):
    """Unknown, missing or malformed configuration key."""


class DataError(RobustFSError):
    """Malformed or inconsistent input data (exit code 2)."""


class NumericError(RobustFSError):
    """A NaN or infinity appeared in training or evaluation (exit code 3)."""


class ShapeError(UsageError, ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class LabelError(DataError, ValueError):
    """Integer label outside ``[0, num_classes)``."""


class ZeroVectorError(NumericError, ValueError):
    """l2 normalization of an exactly-zero vector."""


class CheckpointError(DataError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class IdxFormatError(DataError):
    """Base class for IDX decoding failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class OutOfRangeError(DataError):
    """External data outside ``[0, 1]``; loaders reject rather than clamp."""


class SplitError(DataError):
    """Overlapping or unknown class ids in a split manifest."""


class EpisodeError(DataError):
    """Not enough classes or samples to draw an episode."""
