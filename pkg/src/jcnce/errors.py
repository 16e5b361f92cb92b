"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: plain ``ValueError`` (bad arguments,
out-of-range parameters) exits 2, ``DataError`` subclasses exit 3, and
``NumericsError`` exits 4.
"""


class DataError(Exception):
    """Base class for problems with on-disk or in-memory data."""


class LoadError(DataError):
    """A referenced file is missing or unreadable."""


class FormatError(DataError):
    """A file exists but its contents do not match the declared format."""


class ValidationError(DataError):
    """A dataset or prediction table violates its invariants."""


class NumericsError(Exception):
    """A numerical procedure produced non-finite values or could not proceed."""


class FitError(ValueError):
    """A regression fit is underdetermined (rank-deficient design)."""
