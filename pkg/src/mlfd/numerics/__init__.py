"""Dense 64-bit tensor core: reverse-mode autodiff over a tape, forward
primitives, parameter initialization, optimizers, and tensor serialization."""

from mlfd.numerics.tensor import Parameter, Tape, Tensor, backward, tape_scope
from mlfd.numerics.ops import (
    add,
    avg_pool2d,
    batchnorm,
    bias_add,
    concat_channels,
    conv2d,
    cross_entropy,
    dropout,
    flatten,
    gelu,
    global_avg_pool,
    matmul,
    mse,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_with_temperature,
    xavier_init,
)
from mlfd.numerics.optim import OptimizerState, optimizer_step
from mlfd.numerics.serialize import load_tensor, read_tensor, save_tensor, write_tensor

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "tape_scope",
    "xavier_init",
    "matmul",
    "bias_add",
    "conv2d",
    "relu",
    "gelu",
    "sigmoid",
    "batchnorm",
    "dropout",
    "global_avg_pool",
    "avg_pool2d",
    "concat_channels",
    "flatten",
    "reshape",
    "add",
    "mul",
    "scale",
    "softmax_with_temperature",
    "cross_entropy",
    "mse",
    "OptimizerState",
    "optimizer_step",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]
