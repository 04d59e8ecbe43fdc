"""
Exception hierarchy shared by every stage of the pipeline.

Validation helpers (``layout.validate_layout``) never raise; they return
violations. Everything else signals failure with one of these.
"""
from typing import Any, Optional, Sequence


class ComposeError(Exception):
    """Root of all domain errors."""


class GrammarError(ComposeError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class CapacityError(ComposeError):
    pass


class TransportError(ComposeError):
    def __init__(self, message: str, transcript: Any = None):
        super().__init__(message)
        self.transcript = transcript


class SchemaError(ComposeError):
    def __init__(self, message: str, transcript: Any = None):
        super().__init__(message)
        self.transcript = transcript


class RubricParseError(ComposeError):
    pass


class ShapeError(ComposeError):
    pass


class NumericalError(ComposeError):
    pass


class DivergenceError(ComposeError):
    pass


class CheckpointError(ComposeError):
    pass


class VocabularyError(ComposeError):
    pass


class NoForegroundError(ComposeError):
    pass


class DegenerateBoxError(ComposeError):
    pass


class PipelineError(ComposeError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class MissingRunError(ComposeError):
    def __init__(self, missing: Sequence[str], message: Optional[str] = None):
        missing = list(missing)
        super().__init__(message or f"missing inputs: {', '.join(missing)}")
        self.missing = missing
