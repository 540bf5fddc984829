"""Minimal dense-tensor engine: layer kernels, reverse-mode autodiff and Adam."""
from .gradcheck import gradient_check, projection_loss, relative_error
from .kernels import (
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_average_pool_backward,
    global_average_pool_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_cross_entropy_backward,
    softmax_cross_entropy_forward,
)
from .ops import (
    add,
    conv2d,
    convex_mix,
    dense,
    flatten,
    global_average_pool,
    maxpool2x2,
    relu,
    softmax_cross_entropy,
    weighted_sum,
)
from .optim import adam_step, he_normal
from .tensor import Parameter, Tensor, dtype_for
