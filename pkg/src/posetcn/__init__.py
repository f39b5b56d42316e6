"""3D human pose lifting with dilated temporal convolutions, in pure NumPy."""
from .camera import CameraModel, project, world_to_camera
from .errors import (
    BehindCameraError,
    CheckpointError,
    ConfigError,
    DataFormatError,
    DegenerateBatchError,
    NonFiniteError,
    PoseError,
    ShapeError,
    TemporalExtentError,
)
from .model import ModelConfig, TemporalModel, predict_sequence
from .skeleton import H36M_17, Skeleton

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CameraModel",
    "CheckpointError",
    "ConfigError",
    "DataFormatError",
    "DegenerateBatchError",
    "H36M_17",
    "ModelConfig",
    "NonFiniteError",
    "PoseError",
    "ShapeError",
    "Skeleton",
    "TemporalExtentError",
    "TemporalModel",
    "predict_sequence",
    "project",
    "world_to_camera",
]
