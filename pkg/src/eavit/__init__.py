"""External-attention Vision Transformer for music genre classification."""

from .model import EAViT, ModelConfig, param_count
from .tensor import Tensor, backward, grad_check

__all__ = ["EAViT", "ModelConfig", "Tensor", "backward", "grad_check", "param_count"]
__version__ = "0.1.0"
