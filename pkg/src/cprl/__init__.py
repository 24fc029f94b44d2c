"""Causal rank-based feature activation for robust image quality regression."""

from .attacks import AttackSpec, attack_sweep, fgsm, pgd, score_reflection
from .autodiff import Tensor, no_grad
from .estimator import QualityRegressor
from .layer import CprlConfig, Phase, activate, channel_mask, soft_rank
from .metrics import evaluate, landscape, plcc, srcc
from .models import QualityNet
from .training import TrainConfig, Trainer

__all__ = [
    "AttackSpec", "CprlConfig", "Phase", "QualityNet", "QualityRegressor", "Tensor",
    "TrainConfig", "Trainer", "activate", "attack_sweep", "channel_mask", "evaluate",
    "fgsm", "landscape", "no_grad", "pgd", "plcc", "score_reflection", "soft_rank", "srcc",
]

__version__ = "0.1.0"
