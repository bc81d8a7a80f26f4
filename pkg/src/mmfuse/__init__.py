"""Multimodal fusion for dialogue explanation generation on a small numpy autodiff engine."""
from .kernels import BACKEND
from .tensor import Tensor, backward, grad_check, no_grad
from .config import ModelConfig, TrainConfig, PRESETS
from .model import ModelState
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "backward", "grad_check", "no_grad", "ModelConfig", "TrainConfig",
           "PRESETS", "ModelState", "load_checkpoint", "save_checkpoint", "__version__"]
