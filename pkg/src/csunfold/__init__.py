"""Block-based compressed sensing with an unfolded proximal-gradient
reconstruction network, a classical iterative baseline, and desk-scale
training and evaluation tooling."""

from .estimators import BlockSampler, IstaBaseline, UnfoldedReconstructor
from .metrics import psnr, ssim
from .model import ModelConfig, desk_config, init_parameters, load_checkpoint, save_checkpoint
from .sampling import MeasurementSet, SamplingOperator, make_operator, measure_image

__all__ = [
    "BlockSampler",
    "IstaBaseline",
    "UnfoldedReconstructor",
    "ModelConfig",
    "MeasurementSet",
    "SamplingOperator",
    "desk_config",
    "init_parameters",
    "load_checkpoint",
    "make_operator",
    "measure_image",
    "psnr",
    "save_checkpoint",
    "ssim",
]

__version__ = "0.1.0"
