"""Hybrid cosine-based convolution (CBC) layers in NumPy."""

from .cbc_basis import (
    CbcFilterParams,
    FeatureDirect,
    FeatureWeight,
    SpatialDirection,
    SpatialProduct,
    SpatialUnit,
    grad_params,
    param_count,
    synthesize_weights,
)
from .hybrid_layer import HybridConv, hybrid_param_count
from .model import Model, build, compression_factor, count_conv_params, load_config, load_preset
from .tensor_core import ConvGeometry

__version__ = "0.1.0"
