"""Recursive neural programs: a two-level hypernetwork generative model over affine parts."""
from .model import RNP, ModelConfig, generate, infer, loss_terms, model_loss, total_loss
from .stn import AffineAction, LevelGeometry, extract_patch, make_action, squash_action, warp
from .tape import Tape, Tensor, grad_check, ops

__version__ = "0.1.0"

__all__ = [
    "RNP", "ModelConfig", "generate", "infer", "loss_terms", "model_loss", "total_loss",
    "AffineAction", "LevelGeometry", "extract_patch", "make_action", "squash_action", "warp",
    "Tape", "Tensor", "grad_check", "ops",
]
