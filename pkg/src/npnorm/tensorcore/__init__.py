"""Dense float64 numerics: tensors, reverse-mode autodiff, layers, ADAM."""
from . import autograd
from .autograd import Tensor, backward
from .io import TensorFormatError, load_tensor, save_tensor
from .layers import forward_layer
from .linalg import LstsqResult, lstsq
from .optim import AdamState, adam_step, geometric_schedule, validate_schedule
from .rng import Rng

__all__ = [
    "AdamState", "LstsqResult", "Rng", "Tensor", "TensorFormatError", "adam_step",
    "autograd", "backward", "forward_layer", "geometric_schedule", "load_tensor",
    "lstsq", "save_tensor", "validate_schedule",
]
