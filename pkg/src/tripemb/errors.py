"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Shapes or settings that cannot describe a valid network or run."""


class UsageError(ValueError):
    """A function was called with arguments outside its contract."""


class DataError(ValueError):
    """Input data (masks, image files, label tables) is malformed."""


class SamplingError(RuntimeError):
    """A triplet could not be drawn for the current anchor."""


class TrainingError(RuntimeError):
    """Training produced non-finite values and was aborted."""
