"""Exception hierarchy shared by all docprune modules."""
from __future__ import annotations


class DocPruneError(Exception):
    """Base class for toolkit errors."""


class FormatError(DocPruneError):
    """A file could not be decoded (I/O-side failure)."""


class UnsupportedFormatError(FormatError):
    pass


class CorruptDataError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class GeometryError(DocPruneError, ValueError):
    """Shapes, dims or index ranges disagree."""


class MissingDataError(DocPruneError):
    """An optional trace component required by the requested operation is absent."""
