"""Forward/backward kernel pairs on raw numpy arrays.

Layout is channels-last throughout: images are ``[B, H, W, C]`` and
convolution kernels ``[kh, kw, Cin, Cout]``.  Each ``*_forward`` returns the
output together with a context object that the matching ``*_backward``
consumes; the differentiable wrappers in :mod:`.ops` are thin shells over
these.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, UsageError, ValidationError


def _expect_grad_shape(grad: np.ndarray, shape: tuple, op: str) -> None:
    if grad.shape != tuple(shape):
        raise DimensionError(f"{op}: upstream gradient shape {grad.shape} != forward output shape {tuple(shape)}")


# -- convolution ------------------------------------------------------------

@dataclass
class ConvContext:
    cols: np.ndarray  # [B*H*W, kh*kw*Cin], rows in row-major (b, i, j) order
    input_shape: tuple
    kernel: np.ndarray


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [B, H, W, C, kh, kw]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, kh * kw * c)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, ConvContext]:
    """Stride-1 cross-correlation with zero "same" padding, plus bias."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects input [B,H,W,Cin] and kernel [kh,kw,Cin,Cout]; got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel must have odd spatial size; got kernel {kernel.shape}")
    if x.shape[3] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    b, h, w, _ = x.shape
    cols = _im2col(x, kh, kw)
    y = cols @ kernel.reshape(kh * kw * cin, cout) + bias
    return y.reshape(b, h, w, cout), ConvContext(cols, x.shape, kernel)


def conv2d_backward(ctx: ConvContext, grad_out: np.ndarray, need_input_grad: bool = True):
    """Return ``(grad_input, grad_kernel, grad_bias)``; ``grad_input`` is None when not needed."""
    if ctx is None:
        raise UsageError("conv2d_backward called without a forward context")
    kh, kw, cin, cout = ctx.kernel.shape
    b, h, w, _ = ctx.input_shape
    _expect_grad_shape(grad_out, (b, h, w, cout), "conv2d_backward")
    g2 = grad_out.reshape(b * h * w, cout)
    grad_kernel = (ctx.cols.T @ g2).reshape(kh, kw, cin, cout)
    grad_bias = g2.sum(axis=0)
    if not need_input_grad:
        return None, grad_kernel, grad_bias
    gcols = (g2 @ ctx.kernel.reshape(kh * kw * cin, cout).T).reshape(b, h, w, kh, kw, cin)
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((b, h + 2 * ph, w + 2 * pw, cin), dtype=grad_out.dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, di:di + h, dj:dj + w, :] += gcols[:, :, :, di, dj, :]
    return gxp[:, ph:ph + h, pw:pw + w, :], grad_kernel, grad_bias


# -- max pooling --------------------------------------------------------------

@dataclass
class PoolContext:
    argmax: np.ndarray  # [B, H/2, W/2, C] index 0..3 inside the window
    input_shape: tuple


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, PoolContext]:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects [B,H,W,C]; got {x.shape}")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H and W; got {x.shape}")
    # window positions ordered (0,0), (0,1), (1,0), (1,1): row-major scan
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)  # first maximum wins ties
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, PoolContext(idx, x.shape)


def maxpool2x2_backward(ctx: PoolContext, grad_out: np.ndarray) -> np.ndarray:
    if ctx is None:
        raise UsageError("maxpool2x2_backward called without a forward context")
    b, h, w, c = ctx.input_shape
    _expect_grad_shape(grad_out, (b, h // 2, w // 2, c), "maxpool2x2_backward")
    gwin = np.zeros((b, h // 2, w // 2, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(gwin, ctx.argmax[..., None], grad_out[..., None], axis=-1)
    return gwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)


# -- dense --------------------------------------------------------------------

@dataclass
class DenseContext:
    x: np.ndarray
    weight: np.ndarray


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, DenseContext]:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense inner-dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense bias shape {bias.shape} does not match weight {weight.shape}")
    return x @ weight + bias, DenseContext(x, weight)


def dense_backward(ctx: DenseContext, grad_out: np.ndarray):
    if ctx is None:
        raise UsageError("dense_backward called without a forward context")
    _expect_grad_shape(grad_out, (ctx.x.shape[0], ctx.weight.shape[1]), "dense_backward")
    return grad_out @ ctx.weight.T, ctx.x.T @ grad_out, grad_out.sum(axis=0)


# -- pointwise / reductions ---------------------------------------------------

def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if mask is None:
        raise UsageError("relu_backward called without a forward context")
    _expect_grad_shape(grad_out, mask.shape, "relu_backward")
    # subgradient at exactly 0 is 0
    return grad_out * mask


def global_average_pool_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    if x.ndim != 4:
        raise DimensionError(f"global_average_pool expects [B,H,W,C]; got {x.shape}")
    return x.mean(axis=(1, 2)), x.shape


def global_average_pool_backward(input_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    if input_shape is None:
        raise UsageError("global_average_pool_backward called without a forward context")
    b, h, w, c = input_shape
    _expect_grad_shape(grad_out, (b, c), "global_average_pool_backward")
    return np.broadcast_to(grad_out[:, None, None, :] / (h * w), input_shape).copy()


# -- softmax cross-entropy ----------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def validate_one_hot(target: np.ndarray) -> None:
    if target.ndim != 2:
        raise ValidationError(f"targets must be [B,P] one-hot rows; got shape {target.shape}")
    binary = np.all((target == 0) | (target == 1), axis=1)
    single = target.sum(axis=1) == 1
    bad = np.flatnonzero(~(binary & single))
    if bad.size:
        raise ValidationError(f"target rows {bad[:10].tolist()} are not one-hot")


def softmax_cross_entropy_forward(logits: np.ndarray, target: np.ndarray):
    """Mean cross-entropy over the batch; returns ``(loss, probs)``."""
    if logits.ndim != 2 or logits.shape != target.shape:
        raise DimensionError(f"logits {logits.shape} and targets {target.shape} must both be [B,P]")
    validate_one_hot(target)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -(target * log_probs).sum() / logits.shape[0]
    return np.asarray(loss, dtype=logits.dtype), np.exp(log_probs)


def softmax_cross_entropy_backward(probs: np.ndarray, target: np.ndarray, grad_out=1.0) -> np.ndarray:
    if probs is None:
        raise UsageError("softmax_cross_entropy_backward called without a forward context")
    return ((probs - target) / probs.shape[0] * grad_out).astype(probs.dtype, copy=False)
