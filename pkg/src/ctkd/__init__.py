"""Collaborative teaching knowledge distillation on a small numpy autodiff core."""

from .autodiff import Tensor, backward, detach, no_grad
from .config import TrainConfig, load_config
from .errors import CTKDError
from .models import WrnSpec, build_wrn

__all__ = ["CTKDError", "Tensor", "TrainConfig", "WrnSpec", "backward", "build_wrn", "detach", "load_config", "no_grad"]
__version__ = "0.1.0"
