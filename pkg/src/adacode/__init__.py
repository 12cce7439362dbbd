"""Image restoration with adaptive blends of class-specific VQ codebooks."""

from .adaptive import BasisSet, WeightPredictor, combine, predict_weights, quantize_all
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codebook import VectorCodebook, code_usage, quantize, straight_through, visualize_code, vq_loss
from .config import RunConfig, load_config, preset
from .errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    ConfigError,
    InvalidInputError,
    StageMismatchError,
    TrainingDivergedError,
)
from .metrics import EvalReport, evaluate, psnr, ssim
from .models import AdaCodeModel, VQModel
from .training import train_stage1, train_stage2, train_stage3

__version__ = "0.1.0"

__all__ = [
    "AdaCodeModel",
    "BasisSet",
    "Checkpoint",
    "CheckpointCorruptError",
    "CheckpointFormatError",
    "ConfigError",
    "EvalReport",
    "InvalidInputError",
    "RunConfig",
    "StageMismatchError",
    "TrainingDivergedError",
    "VQModel",
    "VectorCodebook",
    "WeightPredictor",
    "code_usage",
    "combine",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "predict_weights",
    "preset",
    "psnr",
    "quantize",
    "quantize_all",
    "save_checkpoint",
    "ssim",
    "straight_through",
    "train_stage1",
    "train_stage2",
    "train_stage3",
    "visualize_code",
    "vq_loss",
]
