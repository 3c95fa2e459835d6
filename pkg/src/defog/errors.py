"""Exception types shared across the toolkit."""


class DefogError(Exception):
    """Base class for all defog errors."""


class ShapeError(DefogError):
    """An operation rejected its inputs because of incompatible shapes or values."""


class DataError(DefogError):
    """A file, image, or dataset could not be read or does not match its contract."""


class NumericError(DefogError):
    """A computation produced non-finite values or otherwise failed numerically."""
