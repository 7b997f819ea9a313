class RouterLabError(Exception):
    """Base class for all errors raised by routerlab."""


class ParameterError(RouterLabError, ValueError):
    """An argument is out of its valid range."""


class ShapeError(RouterLabError, ValueError):
    """Tensor shapes do not line up."""


class FormatError(RouterLabError, ValueError):
    """A file on disk does not match its declared binary or text layout."""
