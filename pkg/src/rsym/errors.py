"""Exception hierarchy shared by every module."""

from __future__ import annotations


class RsymError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RsymError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ValidationError(RsymError, ValueError):
    """A value violates a documented precondition (non-finite, non-orthogonal, zero scale...)."""


class ConfigError(RsymError, ValueError):
    """Transformer configurations are invalid or do not agree."""


class InputError(RsymError, ValueError):
    """Caller-supplied data (tokens, datasets, indices) is out of range or empty."""


class NumericError(RsymError, ArithmeticError):
    """A computation produced non-finite values or hit a singular system."""


class FormatError(RsymError):
    """A file does not follow the expected container format."""


class IntegrityError(RsymError):
    """A file is well-formed at the top level but its contents are inconsistent or truncated."""
