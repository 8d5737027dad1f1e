"""Exception hierarchy shared by every kaprompt module."""


class KAPromptError(Exception):
    """Base class for all library errors."""


class DimensionError(KAPromptError, ValueError):
    pass


class DegenerateVectorError(KAPromptError, ValueError):
    pass


class UsageError(KAPromptError, RuntimeError):
    pass


class LabelIndexError(KAPromptError, IndexError):
    pass


class EmptyInputError(KAPromptError, ValueError):
    pass


class CapacityError(KAPromptError, ValueError):
    pass


class ValidationError(KAPromptError, ValueError):
    pass


class PreconditionError(KAPromptError, RuntimeError):
    pass


class NotApplicableError(KAPromptError):
    """Raised when an operation has no meaning at the current stage (e.g. alignment at t = 1)."""


class EvaluationError(KAPromptError, ValueError):
    pass


class ConfigError(KAPromptError, ValueError):
    pass


class CheckpointError(KAPromptError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
