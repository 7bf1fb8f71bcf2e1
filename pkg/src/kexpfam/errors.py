"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericalError -> 3, OS-level I/O failures -> 4.
"""


class KexpfamError(Exception):
    """Base class for errors raised by this package."""


class DataError(KexpfamError, ValueError):
    """Malformed or inconsistent input data (shapes, parsing, validation)."""


class ArchiveError(DataError):
    """Model archive cannot be read: bad magic, version, or checksum."""


class NumericalError(KexpfamError, RuntimeError):
    """A numerical procedure failed (factorization, overflow, non-finite values)."""
