"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operation's input shapes violate its preconditions."""


class FormatError(ValueError):
    """A file does not conform to the expected binary layout."""


class DegenerateError(ValueError):
    """Input is degenerate for the requested operation (e.g. constant data)."""


class PlacementError(RuntimeError):
    """Object placement failed after the maximum number of attempts."""


class ConfigError(ValueError):
    """A run configuration contains unknown or invalid entries."""
