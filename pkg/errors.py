"""Exception hierarchy for HushDiff."""


class HushDiffError(Exception):
    """Base exception for HushDiff errors."""

    exit_code: int = 1


class ShapeError(HushDiffError):
    """Operand shapes are invalid for an operation."""

    pass


class NumericError(HushDiffError):
    """An operation produced or received non-finite values."""

    pass


class GradientError(HushDiffError):
    """Backward pass requested on something that cannot be differentiated."""

    pass


class ScheduleError(HushDiffError):
    """Diffusion schedule is infeasible or malformed."""

    pass


class StepRangeError(HushDiffError):
    """A diffusion step index is outside [1, T]."""

    pass


class DataError(HushDiffError):
    """Signal or corpus data violates a precondition."""

    pass


class LabelError(HushDiffError):
    """Noise class label outside the classifier range."""

    pass


class InjectionError(HushDiffError):
    """Unknown injection mode or incompatible conditioner widths."""

    pass


class MetricError(HushDiffError):
    """Metric inputs are empty or degenerate."""

    pass


class TrainingDivergedError(HushDiffError):
    """Training loss became non-finite or exceeded the divergence threshold."""

    exit_code = 7


class SamplingError(HushDiffError):
    """Reverse process produced a non-finite state."""

    pass


class ConfigError(HushDiffError):
    """Configuration is inconsistent."""

    exit_code = 4


class MissingFileError(HushDiffError):
    """A referenced file or directory does not exist."""

    exit_code = 3


class SchemaError(HushDiffError):
    """A config, manifest or checkpoint does not match its schema."""

    exit_code = 4


class VersionMismatchError(HushDiffError):
    """Checkpoint format version is not supported."""

    exit_code = 5


class EmptyInputError(HushDiffError):
    """A command received no records to process."""

    exit_code = 6


class OutputError(HushDiffError):
    """An expected output was not written."""

    exit_code = 8
