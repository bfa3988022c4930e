"""Patch-based attention classifier on a small numpy autograd engine."""

from .config import RunConfig, load_config
from .estimator import SYDNetClassifier
from .model import SYDNet, build_model, count_parameters
from .patches import PATCH_SETS, build_patch_set
from .trainer import evaluate, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "PATCH_SETS",
    "RunConfig",
    "SYDNet",
    "SYDNetClassifier",
    "build_model",
    "build_patch_set",
    "count_parameters",
    "evaluate",
    "load_config",
    "run_ablation",
    "train",
]
