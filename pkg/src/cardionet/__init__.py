"""Cardiomegaly detection with a from-scratch numpy U-Net."""
from .errors import CardioNetError
from .tensor import ConvSpec, Tensor
from .unet import Model, Prediction, UNetConfig, build_unet, classify, forward
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CardioNetError", "ConvSpec", "Tensor", "Model", "Prediction", "UNetConfig",
    "build_unet", "classify", "forward", "load_checkpoint", "save_checkpoint",
]
