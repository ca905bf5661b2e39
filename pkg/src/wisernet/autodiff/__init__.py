"""Minimal numpy tensor engine with reverse-mode gradients."""

from wisernet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from wisernet.autodiff.functional import (
    activation,
    conv2d,
    global_avg_pool,
    instance_norm,
    l2_normalize,
    pad_replicate,
    relu,
    sigmoid,
    upsample,
)
from wisernet.autodiff.gradcheck import check_gradients, numerical_grad, relative_error
from wisernet.autodiff.nn import Conv2d, ConvReLUStack, Module, OptimizerState, Parameter
from wisernet.autodiff.optim import Adam, adam_step
from wisernet.autodiff.tensor import (
    Tensor,
    as_tensor,
    concat,
    get_default_dtype,
    no_grad,
    precision,
    profile,
    set_default_dtype,
    where,
)

__all__ = [
    "Adam",
    "Conv2d",
    "ConvReLUStack",
    "Module",
    "OptimizerState",
    "Parameter",
    "Tensor",
    "activation",
    "adam_step",
    "as_tensor",
    "check_gradients",
    "concat",
    "conv2d",
    "get_default_dtype",
    "global_avg_pool",
    "instance_norm",
    "l2_normalize",
    "load_checkpoint",
    "no_grad",
    "numerical_grad",
    "pad_replicate",
    "precision",
    "profile",
    "relative_error",
    "relu",
    "save_checkpoint",
    "set_default_dtype",
    "sigmoid",
    "upsample",
    "where",
]
