"""Differentiable operations on :class:`Tensor`."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from . import kernels as K
from .tensor import Tensor, make_result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    y, ctx = K.conv2d_forward(x.data, kernel.data, bias.data)
    return make_result(y, (x, kernel, bias), lambda g: K.conv2d_backward(ctx, g, x.requires_grad),
                       "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    y, ctx = K.maxpool2x2_forward(x.data)
    return make_result(y, (x,), lambda g: (K.maxpool2x2_backward(ctx, g),), "maxpool2x2")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    y, ctx = K.dense_forward(x.data, weight.data, bias.data)
    return make_result(y, (x, weight, bias), lambda g: K.dense_backward(ctx, g), "dense")


def relu(x: Tensor) -> Tensor:
    y, mask = K.relu_forward(x.data)
    return make_result(y, (x,), lambda g: (K.relu_backward(mask, g),), "relu")


def global_average_pool(x: Tensor) -> Tensor:
    y, shape = K.global_average_pool_forward(x.data)
    return make_result(y, (x,), lambda g: (K.global_average_pool_backward(shape, g),), "global_average_pool")


def flatten(x: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)] in row-major order."""
    shape = x.shape
    y = x.data.reshape(shape[0], -1)
    return make_result(y, (x,), lambda g: (g.reshape(shape),), "flatten")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def convex_mix(own: Tensor, other: Tensor, alpha: float) -> Tensor:
    """``alpha * own + (1 - alpha) * other``."""
    if own.shape != other.shape:
        raise DimensionError(f"convex_mix: shape mismatch {own.shape} vs {other.shape}")
    a = own.data.dtype.type(alpha)
    b = own.data.dtype.type(1.0 - alpha)
    y = a * own.data + b * other.data
    return make_result(y, (own, other), lambda g: (a * g, b * g), "convex_mix")


def weighted_sum(terms: list[Tensor], weights: list[float]) -> Tensor:
    """Weighted sum of same-shape tensors (used to combine scalar losses)."""
    dt = terms[0].data.dtype
    ws = [dt.type(w) for w in weights]
    y = sum(w * t.data for w, t in zip(ws, terms))
    return make_result(np.asarray(y, dtype=dt), tuple(terms), lambda g: tuple(w * g for w in ws), "weighted_sum")


def softmax_cross_entropy(logits: Tensor, target) -> tuple[Tensor, np.ndarray]:
    """Mean softmax cross-entropy over the batch; returns ``(loss, probs)``."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    loss, probs = K.softmax_cross_entropy_forward(logits.data, t)
    out = make_result(loss, (logits,), lambda g: (K.softmax_cross_entropy_backward(probs, t, g),),
                      "softmax_cross_entropy")
    return out, probs
