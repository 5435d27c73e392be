"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, MissingInputError -> 3,
DataMismatchError -> 4. Plain ValueError covers math-domain violations
(negative thickness, out-of-range frequency) raised by library code.
"""


class ShapeError(ValueError):
    """Array shape does not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, unknown primitive."""


class MissingInputError(FileNotFoundError):
    """A required input (dataset, checkpoint, ground truth) does not exist."""


class DataMismatchError(ValueError):
    """On-disk data is internally inconsistent (manifest vs files)."""
