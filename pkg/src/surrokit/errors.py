"""Exception types shared by all techniques."""


class SurrogateError(Exception):
    """Base class for every error raised by the toolkit."""


class DataError(SurrogateError, ValueError):
    """Malformed training or prediction data."""


class EncodingError(DataError):
    """A categorical label was not seen during training."""


class ConfigurationError(SurrogateError, ValueError):
    """Invalid option or technique configuration."""


class ConflictError(SurrogateError):
    """User requirements that no technique can satisfy together."""


class CapacityError(SurrogateError):
    """Problem size or dimension outside what a technique can handle."""


class DimensionReductionError(CapacityError):
    """Inputs are affinely dependent; a lower-dimensional model is needed."""


class UnsupportedCapabilityError(SurrogateError):
    """Requested gradient/AE/smoothing from a model that lacks it."""


class DegenerateMetricError(SurrogateError, ValueError):
    """RRMS is undefined because all true values are equal."""


class ModelFormatError(SurrogateError):
    """A model file could not be decoded."""


class SelectionError(SurrogateError):
    """Every evaluation of a parameter search failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])
