"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3,
anything argument-shaped -> 1.
"""


class DataError(Exception):
    """Malformed or missing input data (CSV rows, manifests, rasters)."""


class MaskError(DataError):
    """Lung mask extraction failed, e.g. no candidate dark component."""


class NumericalError(Exception):
    """A computation cannot proceed (singular design, non-finite loss)."""


class SingularDesignError(NumericalError):
    """Least-squares design with no unique solution (all timestamps equal)."""
