"""Exception hierarchy shared by all glyphflow modules."""


class GlyphflowError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(GlyphflowError, ValueError):
    """An argument violated a documented precondition (rejected input)."""


class NumericalError(GlyphflowError, ArithmeticError):
    """A numerical routine failed (non-SPD factorization, non-finite result)."""


class AdapterStateError(GlyphflowError, RuntimeError):
    """An adapter operation was applied in the wrong state (e.g. double merge)."""


class TrainingDivergedError(GlyphflowError, RuntimeError):
    """A training loop produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class CheckpointFormatError(GlyphflowError, ValueError):
    """A checkpoint file is malformed or has an unsupported version."""


class EditSequenceError(GlyphflowError, RuntimeError):
    """An edit in a sequence failed; earlier edits remain applied.

    Attributes:
        index: position of the failing request in the sequence.
        reports: reports for the edits that completed before the failure.
    """

    def __init__(self, index: int, reports, cause: Exception):
        self.index = index
        self.reports = list(reports)
        self.cause = cause
        super().__init__(f"edit {index} failed: {cause}")
