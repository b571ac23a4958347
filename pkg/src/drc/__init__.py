"""Unsupervised foreground extraction with competing generators and latent energy-based priors."""
from .config import RunConfig
from .errors import (ChainDivergence, ConfigurationError, DRCError, GenerationError, IngestionError,
                     NumericalFailure, UsageError)

__version__ = "0.1.0"
