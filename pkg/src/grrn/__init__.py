"""Grouped residual-in-residual video super-resolution, self-contained:
hand-written CPU kernels with analytic gradients, a trainable model, data
tooling, and PSNR/SSIM evaluation."""

from .config import PRESETS, ModelConfig, preset
from .model import Network, build, count_parameters
from .training import Adam, TrainLog, TrainPlan, train

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "ModelConfig",
    "preset",
    "Network",
    "build",
    "count_parameters",
    "Adam",
    "TrainLog",
    "TrainPlan",
    "train",
    "__version__",
]
