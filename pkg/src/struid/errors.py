"""Error taxonomy shared across pipeline stages.

The CLI maps these onto exit codes: bad input/config -> 2, missing
predecessor artifact -> 3, numerical failure -> 4.
"""


class DataError(ValueError):
    """Raised for unusable input data or configuration."""


class MissingArtifactError(RuntimeError):
    """Raised when a pipeline stage lacks a predecessor's artifact."""


class NumericalError(RuntimeError):
    """Raised when training aborts on non-finite losses."""
