"""Exception types shared across the package."""


class QStoreError(Exception):
    """Base class for all qstore errors."""


class FormatError(QStoreError):
    """A file, header, or manifest does not conform to the on-disk format."""


class GeometryError(QStoreError):
    """Shapes, dtypes, or quantization block geometry are inconsistent."""


class CorruptionError(QStoreError):
    """Stored data fails an integrity check (checksum, counts, bitstream)."""
