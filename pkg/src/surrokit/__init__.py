"""Surrogate-modeling toolkit: several approximation techniques behind one model interface,
automatic technique selection, and a benchmark harness."""

from .api import train
from .core import (CvEstimate, InputMap, ModelOptions, SurrogateModel, TrainingSample, k_fold_cv, load_model,
                   rrms, save_model, smooth_model, validate_sample)
from .data import load_csv
from .errors import (CapacityError, ConfigurationError, ConflictError, DataError, DegenerateMetricError,
                     DimensionReductionError, EncodingError, ModelFormatError, SelectionError, SurrogateError,
                     UnsupportedCapabilityError)
from .selector import decision_tree_select, smart_select

__version__ = "0.1.0"

__all__ = [
    "train", "CvEstimate", "InputMap", "ModelOptions", "SurrogateModel", "TrainingSample", "k_fold_cv",
    "load_model", "rrms", "save_model", "smooth_model", "validate_sample", "load_csv", "decision_tree_select",
    "smart_select", "CapacityError", "ConfigurationError", "ConflictError", "DataError", "DegenerateMetricError",
    "DimensionReductionError", "EncodingError", "ModelFormatError", "SelectionError", "SurrogateError",
    "UnsupportedCapabilityError",
]
