"""Numerical substrate: tensors with reverse-mode gradients, layers' math, SGD."""
from . import functional
from .functional import (
    conv2d,
    conv_output_size,
    cross_entropy,
    global_avg_pool,
    linear,
    log_softmax_spatial,
    maxpool2d,
    relu,
    sigmoid,
    softmax_spatial,
    softmax_vec,
    batchnorm2d,
)
from .optim import SGD, sgd_step
from .rng import RngStream, name_id, rng_stream
from .tensor import (
    DisconnectedParamError,
    NonFiniteError,
    Param,
    Tensor,
    as_tensor,
    backprop,
    no_grad,
)

__all__ = [
    "functional", "conv2d", "conv_output_size", "cross_entropy", "global_avg_pool",
    "linear", "log_softmax_spatial", "maxpool2d", "relu", "sigmoid", "softmax_spatial",
    "softmax_vec", "batchnorm2d", "SGD", "sgd_step", "RngStream", "name_id", "rng_stream",
    "DisconnectedParamError", "NonFiniteError", "Param", "Tensor", "as_tensor", "backprop",
    "no_grad",
]
