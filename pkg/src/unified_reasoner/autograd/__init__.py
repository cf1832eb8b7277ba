from .tensor import (
    AutogradError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    cross_entropy,
    embedding,
    gelu,
    getitem,
    grad,
    layer_norm,
    masked_fill,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    precision,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
)

__all__ = [
    "AutogradError", "Tensor", "add", "as_tensor", "backward", "concat", "conv2d",
    "cross_entropy", "embedding", "gelu", "getitem", "grad", "layer_norm", "masked_fill",
    "matmul", "max_pool2d", "mean", "mul", "no_grad", "precision", "relu", "reshape",
    "scale", "softmax", "transpose", "tsum",
]
