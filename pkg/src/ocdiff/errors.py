"""Exception types shared across the package."""


class OCDError(Exception):
    """Base class for all errors raised by ocdiff."""


class ShapeError(OCDError, ValueError):
    """Token counts or grid dimensions do not line up."""


class PartitionError(OCDError, ValueError):
    """Index maps overlap or fail to cover the token range."""


class EmptyForegroundError(OCDError):
    """A mask has no foreground bits where at least one was required."""


class DegenerateTokenError(OCDError, ValueError):
    """A token vector has zero norm, so cosine similarity is undefined."""


class ConfigError(OCDError, ValueError):
    """Invalid configuration values."""
