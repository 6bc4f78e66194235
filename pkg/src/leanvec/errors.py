"""Exception hierarchy.

Input problems raise :class:`ValidationError`; anything wrong with a file on
disk raises a subclass of :class:`StorageError`. The CLI maps the first family
to exit code 1 and the second to exit code 2.
"""


class ValidationError(ValueError):
    pass


class StorageError(OSError):
    pass


class TruncatedFileError(StorageError):
    pass


class InconsistentDimensionError(StorageError):
    pass


class ZeroDimensionError(StorageError):
    pass


class BadMagicError(StorageError):
    pass


class VersionMismatchError(StorageError):
    def __init__(self, found, expected):
        super().__init__(f"format version mismatch: file has version {found}, reader supports version {expected}")
        self.found = found
        self.expected = expected


class ChecksumError(StorageError):
    pass
