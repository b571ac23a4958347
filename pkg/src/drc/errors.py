"""Exception hierarchy shared by every module."""


class DRCError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DRCError, ValueError):
    pass


class UsageError(DRCError, ValueError):
    pass


class NumericalFailure(DRCError, FloatingPointError):
    """A non-finite value appeared during sampling or training.

    Carries whatever context the raising site had: the offending latents,
    the Langevin step index and/or a per-term loss breakdown.
    """

    def __init__(self, message, *, z=None, step=None, terms=None, iteration=None, sample=None):
        super().__init__(message)
        self.z = z
        self.step = step
        self.terms = terms
        self.iteration = iteration
        self.sample = sample

    def __str__(self):
        msg = super().__str__()
        if self.sample is not None:
            msg += f" (evaluation batch starting at sample {self.sample})"
        return msg


class ChainDivergence(NumericalFailure):
    pass


class GenerationError(DRCError, RuntimeError):
    pass


class IngestionError(DRCError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
