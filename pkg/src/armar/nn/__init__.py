"""Minimal differentiable-array engine: tensors, layers, AdamW, gradcheck."""
from . import tensor
from .tensor import (
    Tensor,
    backward,
    clip,
    concat,
    conv2d,
    conv_transpose2d,
    default_dtype,
    exp,
    matmul,
    mean_,
    mse,
    narrow,
    nearest_upsample2,
    pow_const,
    reshape,
    sigmoid,
    silu,
    softmax,
    square,
    sum_,
    tanh,
    use_dtype,
)
from .layers import (
    Conv2d,
    ConvTranspose2d,
    Downsample,
    GroupNorm,
    Linear,
    Module,
    ModuleList,
    ResidualBlock,
    Sequential,
    SiLU,
    TransformerBlock,
    Upsample,
    fuse_implant,
    fuse_mask,
)
from .optim import AdamW
from .gradcheck import max_relative_error, numeric_gradient
