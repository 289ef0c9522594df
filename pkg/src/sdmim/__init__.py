"""Masked-patch pretraining with visible-token self-distillation."""

from . import autodiff, config, data, gradcheck, losses, model, optim, patching, probe, train
from .autodiff import Tensor, backward, no_grad
from .config import RunConfig, load_config, validate_config
from .train import fit, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "config",
    "data",
    "gradcheck",
    "losses",
    "model",
    "optim",
    "patching",
    "probe",
    "train",
    "Tensor",
    "backward",
    "no_grad",
    "RunConfig",
    "load_config",
    "validate_config",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
    "train_step",
]
