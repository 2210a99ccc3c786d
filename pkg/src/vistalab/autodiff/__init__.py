from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_bias,
    as_tensor,
    backward,
    bmm,
    concat,
    elementwise,
    embedding,
    index,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    square,
    sub,
    transpose,
    tsum,
)
from .optim import SGD, Adam, Optimizer, sgd_adam_step
from . import container

__all__ = [
    "ContractError", "DimensionError", "Tensor", "add", "add_bias", "as_tensor",
    "backward", "bmm", "concat", "elementwise", "embedding", "index", "layer_norm",
    "matmul", "mean", "mul", "relu", "reshape", "softmax", "softmax_cross_entropy",
    "square", "sub", "transpose", "tsum", "SGD", "Adam", "Optimizer", "sgd_adam_step",
    "container",
]
