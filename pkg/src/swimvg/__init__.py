"""Parameter-efficient visual grounding on frozen encoders with step-wise prompts and cross-modal adapters."""

__version__ = "0.1.0"

from .boxes import BoundingBox, giou, iou
from .config import ModelConfig, load_config, profile, validate_config
from .model import SwimVG, build_model

__all__ = [
    "BoundingBox",
    "ModelConfig",
    "SwimVG",
    "build_model",
    "giou",
    "iou",
    "load_config",
    "profile",
    "validate_config",
]
