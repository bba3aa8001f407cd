"""Coarse-to-fine optical flow with pyramid cost-volume aggregation,
correlation-warping-normalization stages, residual flow refinement, and a
hand-written reverse-mode backward pass for every primitive."""

from .tensor import ConvParams, GradPair, ShapeError, Tensor4
from .flowops import CostVolume, FlowField
from .network import NetworkConfig, NetworkParams, StageConfig, init_params
from .loss import LossWeights
from .data import AugmentConfig, MotionSpec, Sample
from .train import OptimState, TrainConfig
from .evaluate import EvalReport, aee

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ConvParams", "CostVolume", "EvalReport", "FlowField",
    "GradPair", "LossWeights", "MotionSpec", "NetworkConfig", "NetworkParams",
    "OptimState", "Sample", "ShapeError", "StageConfig", "Tensor4",
    "TrainConfig", "aee", "init_params", "__version__",
]
