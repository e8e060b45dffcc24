"""Exception types raised by the toolkit.

Every failure mode callers are expected to distinguish gets its own class;
all inherit from :class:`LidarMergeError` so blanket handling stays easy.
"""


class LidarMergeError(Exception):
    """Base class for all toolkit errors."""


class InvalidCalibrationError(LidarMergeError):
    """Camera matrices are non-finite or violate the rigid-transform layout."""


class InvalidInputError(LidarMergeError):
    """An input array violates a basic precondition (non-finite, bad shape)."""


class InconsistentInputError(LidarMergeError):
    """Two inputs that must describe the same data disagree (lengths, indices)."""


class SchemaError(LidarMergeError):
    """Feature column layout changed for a dataset that already has statistics."""


class UnknownDatasetError(LidarMergeError):
    """A dataset id has no registered statistics/profile/classes."""


class MissingLabelsError(LidarMergeError):
    """The operation needs per-point labels and the cloud has none."""


class ConflictingSynonymError(LidarMergeError):
    """A dataset class was listed in more than one synonym group."""


class InvalidLabelError(LidarMergeError):
    """A class or label id is outside the space it is used against."""


class DegenerateRowError(LidarMergeError):
    """A feature row has (near-)zero norm where a direction is required."""


class ParameterError(LidarMergeError):
    """A scalar parameter is outside its valid range (e.g. tau <= 0)."""


class EmptyTargetError(LidarMergeError):
    """Every target row is ignored; the reduction is undefined."""


class InvalidProbabilityError(LidarMergeError):
    """Rows expected to be probability vectors are not normalized."""


class LayerChainError(LidarMergeError):
    """Layer shapes do not chain, or a required activation is missing."""


class DegenerateBaselineError(LidarMergeError):
    """Baseline accuracies sum to a zero corruption-error denominator."""


class DegenerateCleanError(LidarMergeError):
    """Clean accuracy is zero; resilience rates are undefined."""


class MalformedFileError(LidarMergeError):
    """A file does not follow its binary or text layout.

    ``offset`` carries the byte offset of the first offending byte when the
    layout makes one identifiable.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(LidarMergeError):
    """A configuration file is missing, has unknown keys, or bad values."""
