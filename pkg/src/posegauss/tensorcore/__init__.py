"""Dense channels-last tensors with tape-based reverse-mode gradients."""

from .autograd import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backprop,
    concat,
    conv2d_raw,
    clamp_max,
    clamp_min,
    cos,
    div,
    exp,
    index,
    log,
    power,
    reshape,
    sin,
    sqrt,
    tabs,
    transpose,
    tsum,
    tmean,
    where,
    custom_op,
    matmul,
    mul,
    neg,
    param,
    relu,
    resize_bilinear,
    sample_bilinear,
    sample_linear_last,
    sigmoid,
    softplus,
    stack,
    sub,
    tanh,
    upsample_nearest,
)
from .gradcheck import grad_check
from .layers import (
    GRUParams,
    LayerParams,
    ResidualParams,
    SEParams,
    conv2d,
    conv_gru_step,
    dense,
    iter_params,
    residual_block,
    se_block,
    se_gates,
    static,
    zero_grads,
)

__all__ = [
    "add",
    "conv2d_raw",
    "mul",
    "neg",
    "sub",
    "Tape",
    "Tensor",
    "as_tensor",
    "backprop",
    "concat",
    "clamp_max",
    "clamp_min",
    "cos",
    "div",
    "exp",
    "index",
    "log",
    "power",
    "reshape",
    "sin",
    "sqrt",
    "tabs",
    "transpose",
    "tsum",
    "tmean",
    "where",
    "custom_op",
    "matmul",
    "param",
    "relu",
    "resize_bilinear",
    "sample_bilinear",
    "sample_linear_last",
    "sigmoid",
    "softplus",
    "stack",
    "tanh",
    "upsample_nearest",
    "grad_check",
    "GRUParams",
    "LayerParams",
    "ResidualParams",
    "SEParams",
    "conv2d",
    "conv_gru_step",
    "dense",
    "iter_params",
    "residual_block",
    "se_block",
    "se_gates",
    "static",
    "zero_grads",
]
