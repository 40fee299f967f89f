"""Exception hierarchy shared by every neureg module.

Each class carries a stable ``code`` so the CLI can report failures as a
single JSON line without string matching on messages.
"""
from __future__ import annotations


class NeuRegError(Exception):
    """Base class for all errors raised by neureg."""

    code = "error"


class InvalidInputError(NeuRegError, ValueError):
    """An argument violates an operation's precondition."""

    code = "invalid_input"


class ShapeMismatchError(InvalidInputError):
    """Two operands that must share a shape do not."""

    code = "shape_mismatch"


class MissingArgumentError(InvalidInputError):
    """A required command-line flag was not supplied."""

    code = "missing_argument"


class FormatError(NeuRegError, ValueError):
    """A file does not follow the expected binary layout."""

    code = "bad_format"


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedPayloadError(FormatError):
    code = "truncated_payload"


class UnsupportedDtypeError(FormatError):
    code = "unsupported_dtype"


class NiftiHeaderError(FormatError):
    code = "bad_nifti_header"


class ImaginaryResidueError(NeuRegError, ArithmeticError):
    """An inverse DFT produced a non-negligible imaginary part."""

    code = "imaginary_residue"


class TrainingDivergedError(NeuRegError, RuntimeError):
    """The training loss became NaN or infinite."""

    code = "nan_loss"
