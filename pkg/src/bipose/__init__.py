"""Binary neural-network engine for a binarized high-resolution pose estimator.

The hot paths (XOR/popcount convolution, im2col, fused batch-norm) run as
numba kernels; set ``BIPOSE_DISABLE_NUMBA=1`` before import to use the
pure-numpy fallbacks instead.
"""

from ._accel import backend
from .bitpack import BitTensor, compute_scale, pack, pack_activations, pack_weights, sign, unpack
from .errors import (
    BiposeError,
    ConfigurationError,
    CorruptionError,
    DivergenceError,
    FormatError,
    InvalidInputError,
    MissingGradientError,
    TrainingComplete,
    UndefinedMetricError,
)
from .kernels import BINARY, REAL, ConvSpec, OpCount, binary_conv2d, count_ops, real_conv2d
from .model import BinaryPoseNet, NetworkConfig, build, count_params_and_ops, desk_config, load, paper_config, save

__version__ = "0.1.0"

__all__ = [
    "BINARY",
    "REAL",
    "BinaryPoseNet",
    "BitTensor",
    "BiposeError",
    "ConfigurationError",
    "ConvSpec",
    "CorruptionError",
    "DivergenceError",
    "FormatError",
    "InvalidInputError",
    "MissingGradientError",
    "NetworkConfig",
    "OpCount",
    "TrainingComplete",
    "UndefinedMetricError",
    "backend",
    "binary_conv2d",
    "build",
    "compute_scale",
    "count_ops",
    "count_params_and_ops",
    "desk_config",
    "load",
    "pack",
    "pack_activations",
    "pack_weights",
    "paper_config",
    "real_conv2d",
    "save",
    "sign",
    "unpack",
]
