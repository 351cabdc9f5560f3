"""Background-debiased image classification with a causal-interventional regulariser."""

from .autodiff import Tape, Tensor
from .data import Dataset, SyntheticSpec, center_crop_mask, generate_synthetic, load_manifest
from .losses import total_loss
from .metrics import EvalReport, discriminability, evaluate
from .model import CausalModel, load_checkpoint, predict, save_checkpoint
from .nn import BackboneConfig, ConvBlock
from .train import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "CausalModel",
    "ConvBlock",
    "Dataset",
    "EvalReport",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "center_crop_mask",
    "discriminability",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_manifest",
    "predict",
    "save_checkpoint",
    "total_loss",
    "train",
]
