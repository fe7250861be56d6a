"""Exception hierarchy shared by every module.

All package errors derive from MultishadeError so callers can catch the
whole family; the CLI maps subclasses to process exit codes.
"""


class MultishadeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MultishadeError):
    """Array shapes or resolutions are inconsistent."""


class InvalidArgumentError(MultishadeError):
    """An argument violates a documented precondition."""


class NotFoundError(MultishadeError):
    """A referenced resource (e.g. a reference-image id) does not exist."""


class ConfigError(MultishadeError):
    """A configuration value or combination is invalid."""


class CapacityError(MultishadeError):
    """Instance count exceeds the aggregation capacity."""


class NumericError(MultishadeError):
    """A non-finite value (NaN/Inf) was produced or encountered."""


class SchemaError(MultishadeError):
    """A JSON document violates its schema.

    ``path`` is a JSON-pointer-style string locating the offending field.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path or '/'}: {message}" if path else message)
        self.path = path


class InputError(MultishadeError):
    """Input documents are inconsistent with each other (e.g. orphan ids)."""


class StateError(MultishadeError):
    """Required persisted state (e.g. a session directory) is missing."""


class BuildError(MultishadeError):
    """Benchmark construction cannot satisfy a level's instance count."""
