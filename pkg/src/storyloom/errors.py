class ShapeError(ValueError):
    """Array or tensor dimensions do not match what an operation expects."""


class ParameterError(ValueError):
    """A configuration value is outside its valid range."""


class DecodeError(RuntimeError):
    """Decoded text does not have the expected plot structure.

    ``partial`` holds whatever plots were recovered before decoding failed.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = list(partial or [])


class TransportError(RuntimeError):
    """An LLM client could not be reached within its retry budget."""


class ContentError(RuntimeError):
    """An LLM client answered, but with an unusable (empty) response."""


class IncompleteDataError(ValueError):
    """A rating matrix has missing (sample, rater) cells."""


class StageError(RuntimeError):
    """An experiment stage failed; ``stage`` names which one."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
