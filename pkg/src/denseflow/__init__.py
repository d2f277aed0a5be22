"""Desk-scale densely connected normalizing flows.

Normalizing flows with incremental cross-unit noise augmentation, glow-like
invertible modules whose couplings fuse a dense convolution block with
Nystrom self-attention, a Monte-Carlo likelihood lower bound, and a
scikit-learn style estimator facade.
"""

from .bijections import (
    ActNorm,
    AffineCoupling,
    FactorOut,
    InvConv1x1,
    LikelihoodTerms,
    Squeeze,
    UniformDequantizer,
    VariationalDequantizer,
)
from .config import TrainConfig, config_from_text, config_to_text, full_scale_train_config
from .coupling import CouplingNetConfig, DenseBlock, NystromAttention
from .cross_unit import CrossUnitCoupling, strip
from .datasets import ImageDataset, read_dataset, synth_textures, write_dataset
from .errors import (
    ConfigError,
    DataFormatError,
    DenseFlowError,
    NotFittedError,
    NumericDomainError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .estimator import DenseFlowDensityEstimator
from .evaluation import EvalReport, bits_per_dim, evaluate, log_mean_exp
from .model import (
    PRESETS,
    BlockConfig,
    FlowConfig,
    FlowModel,
    build,
    desk_12_4,
    full_45_6,
    full_74_10,
)
from .tensor import Tape, Tensor, no_grad
from .training import Adamax, load_checkpoint, lr_at, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ActNorm", "Adamax", "AffineCoupling", "BlockConfig", "ConfigError",
    "CouplingNetConfig", "CrossUnitCoupling", "DataFormatError", "DenseBlock",
    "DenseFlowDensityEstimator", "DenseFlowError", "EvalReport", "FactorOut",
    "FlowConfig", "FlowModel", "ImageDataset", "InvConv1x1", "LikelihoodTerms",
    "NotFittedError", "NumericDomainError", "NumericError", "NystromAttention",
    "PRESETS", "ShapeError", "Squeeze", "Tape", "Tensor", "TrainConfig",
    "TrainingError", "UniformDequantizer", "VariationalDequantizer",
    "bits_per_dim", "build", "config_from_text", "config_to_text",
    "desk_12_4", "evaluate", "load_checkpoint", "log_mean_exp", "lr_at",
    "no_grad", "full_45_6", "full_74_10", "full_scale_train_config",
    "read_dataset", "save_checkpoint", "strip", "synth_textures", "train",
    "write_dataset",
]
