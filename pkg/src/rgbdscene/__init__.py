"""CPU inference engine for RGB-D panoptic segmentation, instance orientation and scene classification."""
from .config import ModelConfig, Variant, reference_config, tiny_config
from .errors import (
    ConfigurationError,
    ContainerError,
    EngineError,
    MissingTensorError,
    NonFiniteTensorError,
    NumericError,
    ShapeMismatchError,
    TruncatedFileError,
    UnexpectedTensorError,
    VersionError,
)
from .metrics import EvalReport, Evaluator
from .model import Model, PostprocessSettings, Prediction
from .panoptic import PanopticMap, ThingStuffSpec
from .tensor import get_num_threads, num_threads, set_num_threads
from .weights import WeightStore, load, reference_init, save

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContainerError", "EngineError", "EvalReport", "Evaluator",
    "MissingTensorError", "Model", "ModelConfig", "NonFiniteTensorError", "NumericError",
    "PanopticMap", "PostprocessSettings", "Prediction", "ShapeMismatchError",
    "ThingStuffSpec", "TruncatedFileError", "UnexpectedTensorError", "Variant",
    "VersionError", "WeightStore", "get_num_threads", "load", "num_threads",
    "reference_config", "reference_init", "save", "set_num_threads", "tiny_config",
]
