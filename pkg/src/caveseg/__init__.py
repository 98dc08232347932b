"""Cave scene segmentation in pure numpy, with ray-plane caveline triangulation."""

__version__ = "0.1.0"

from .errors import (BehindCameraError, CaveSegError, ConfigError, DataError, DegenerateGeometryError,  # noqa: E402
                     FormatError, ParallelRayError, ParameterError, ShapeError, TrainingError, UsageError)
from .tensor import Tensor, backward, no_grad  # noqa: E402
from .model import PRESETS, CaveSegModel, ModelConfig, count_parameters  # noqa: E402
from .dataset import CLASS_NAMES, DEFAULT_PALETTE, SegmentationSample, generate_synthetic, split_dataset  # noqa: E402
from .metrics import ConfusionMatrix, summarize  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "BehindCameraError", "CaveSegError", "ConfigError", "DataError", "DegenerateGeometryError",
    "FormatError", "ParallelRayError", "ParameterError", "ShapeError", "TrainingError", "UsageError",
    "Tensor", "backward", "no_grad", "PRESETS", "CaveSegModel", "ModelConfig", "count_parameters",
    "CLASS_NAMES", "DEFAULT_PALETTE", "SegmentationSample", "generate_synthetic", "split_dataset",
    "ConfusionMatrix", "summarize", "TrainConfig", "train", "load_checkpoint", "save_checkpoint",
]
