"""Exception hierarchy shared across the pipeline.

``ValidationError`` and its subclasses mean the *input data* is at fault
(CLI exit code 1); everything else derived from ``TalentGraphError`` is a
runtime failure (exit code 2).
"""

from __future__ import annotations


class TalentGraphError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TalentGraphError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A line of an input file could not be parsed.

    Carries the offending 1-based line number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(ValidationError):
    """A binary or structured file does not match its declared format."""


class ProtocolError(TalentGraphError):
    """An external client returned a response outside its contract."""


class TransportError(TalentGraphError):
    """A client call failed in a way that may succeed on retry."""


class RetryExhaustedError(TransportError):
    """All retry attempts for a client call failed."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class NumericError(TalentGraphError):
    """A tensor operation produced or received non-finite values."""


class TrainingDivergedError(TalentGraphError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss
