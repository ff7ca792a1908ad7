"""Exception types shared across the package."""


class RefPartsError(Exception):
    """Base class for all library errors."""


class InvalidInputError(RefPartsError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(RefPartsError, RuntimeError):
    """Geometry input produced an unusable result (e.g. no non-empty segments)."""


class BundleFormatError(RefPartsError, RuntimeError):
    """A dataset bundle file is malformed.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
