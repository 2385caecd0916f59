"""Exception hierarchy.

Validation-type failures map to CLI exit code 2, stage ordering problems to 3.
"""


class ObfTriageError(Exception):
    """Base class for every error raised by the toolkit."""


class ValidationError(ObfTriageError):
    """Bad input data or configuration."""


class MalformedHex(ValidationError):
    pass


class EmptyBytecode(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class VocabError(ValidationError):
    pass


class EmptyContract(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyTail(ValidationError):
    pass


class EmptySet(ValidationError):
    pass


class UnknownChain(ValidationError):
    pass


class CorrelationUndefined(ValidationError):
    pass


class NumericError(ValidationError):
    pass


class AbortThresholdExceeded(ValidationError):
    pass


class IoError(ObfTriageError, OSError):
    pass


class DivergenceError(ObfTriageError):
    """Training loss blew up; ``checkpoint`` holds the last stable parameters."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StageDependencyError(ObfTriageError):
    def __init__(self, stage, missing):
        super().__init__(f"stage {stage!r} requires {missing!r}; run that stage first")
        self.stage = stage
        self.missing = missing
