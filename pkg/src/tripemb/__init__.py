"""Learning low-dimensional image embeddings from similarity triplets with a small numpy CNN."""

from .errors import ConfigurationError, DataError, SamplingError, TrainingError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "SamplingError", "TrainingError", "UsageError", "__version__"]
