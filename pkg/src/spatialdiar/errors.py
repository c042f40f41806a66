"""Exception types shared across the toolkit."""


class SpatialDiarError(Exception):
    """Base class for all toolkit errors."""


class InputError(SpatialDiarError):
    """Malformed or unusable input data (files, shapes, ranges)."""


class NumericalError(SpatialDiarError):
    """A numerical procedure failed (singular matrix, non-finite values)."""
