"""Multimodal semantic segmentation with cross-modal blocks and prototype self-guidance."""

from .model import ModelConfig, SegModel, SGMConfig
from .tensor import Tensor

__all__ = ["ModelConfig", "SegModel", "SGMConfig", "Tensor"]
__version__ = "0.1.0"
