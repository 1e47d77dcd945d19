"""Exception hierarchy shared across the engine."""


class ArkError(Exception):
    """Base class for all operational errors raised by this package."""


class DomainError(ArkError):
    """Input outside the mathematical domain of an operation."""


class GeometryError(ArkError):
    """Raster geometries (CRS, affine, size) do not line up."""


class MissingObjectError(ArkError):
    """A content-addressed object is not present in the store."""


class CorruptObjectError(ArkError):
    """Stored bytes no longer hash to their advertised digest."""


class UnsupportedFormatError(ArkError):
    """Input file is outside the supported ingest subset."""


class MetadataError(ArkError):
    """Required georeferencing or header metadata is absent or invalid."""


class ParseError(ArkError):
    """Source text could not be parsed; carries a byte offset."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class AuthorizationError(ArkError):
    """Flow or capability check failed.

    Deliberately generic: the message never names the tags involved.
    """


class ValidationError(ArkError):
    """A document or request failed structural validation."""
