"""Object-centric image-to-video adaptation at desk scale.

A small numpy autograd core drives a trainable head that sits on frozen
per-frame features: temporal fusion, slot attention with learnable
queries, object interaction and state-change reasoning, trained with an
object distillation loss, a temporal margin loss and cross-entropy.
"""
from .config import TrainConfig
from .errors import ConfigError, FormatError, NaNLossError
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["TrainConfig", "ConfigError", "FormatError", "NaNLossError", "Tensor", "grad_check", "no_grad"]
