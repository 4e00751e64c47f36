"""Toy video-text contrastive activity recognition on a numpy autodiff core."""
from __future__ import annotations

from .model import ModelConfig, VideoTextModel, load_checkpoint, save_checkpoint
from .tensor import Tensor

__all__ = ["ModelConfig", "Tensor", "VideoTextModel", "load_checkpoint", "save_checkpoint"]
__version__ = "0.1.0"
