from .tensor import DTYPE, EngineError, ParamSet, Tensor, check_finite
from .layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    LayerSpec,
    MaxPool2d,
    ReLU,
    backward,
    build_layer,
    forward,
)
from .losses import cross_entropy, kl_divergence, softmax_with_temperature
from .gradcheck import max_rel_error, nudge_from_kinks, numerical_gradient

__all__ = [
    "DTYPE",
    "EngineError",
    "ParamSet",
    "Tensor",
    "check_finite",
    "LayerSpec",
    "Layer",
    "Dense",
    "Conv2d",
    "ReLU",
    "MaxPool2d",
    "BatchNorm2d",
    "Flatten",
    "build_layer",
    "forward",
    "backward",
    "softmax_with_temperature",
    "cross_entropy",
    "kl_divergence",
    "max_rel_error",
    "nudge_from_kinks",
    "numerical_gradient",
]
