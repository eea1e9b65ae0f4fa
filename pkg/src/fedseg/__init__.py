"""Desk-scale federated learning simulator for volumetric tumor segmentation.

Modules cover: a float64 autodiff tensor core (tensor, conv, optim), a
hybrid conv/transformer segmentation model (model, losses), deterministic
synthetic cohorts (data), the federated orchestration loop with digital-twin
personalization (federated, checkpoint), evaluation metrics (metrics), and a
config-driven experiment harness (experiment, cli).
"""

from ._alloc import tune_allocator

tune_allocator()

from .model import ModelConfig, VitConfig, build_model, forward  # noqa: E402
from .params import ParameterStore  # noqa: E402
from .tensor import Tape, Tensor, backward  # noqa: E402

__all__ = [
    "ModelConfig",
    "VitConfig",
    "ParameterStore",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "forward",
]
