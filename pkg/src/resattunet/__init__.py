"""ResAttUNet: a CBAM-gated residual UNet for multispectral segmentation.

Runs on a small numpy autograd core whose hot kernels (im2col/col2im,
max pooling, bilinear resampling) come from a compiled extension when
available. ``resattunet.kernels.BACKEND`` names the active backend.
"""
from .kernels import BACKEND
from .model import ModelConfig, ResAttUNet, param_count
from .tensor import Tape, Tensor, precision

__all__ = ["BACKEND", "ModelConfig", "ResAttUNet", "Tape", "Tensor", "param_count", "precision"]
__version__ = "0.1.0"
