"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor, make_result


def projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``; turns any tensor output into a checkable loss."""
    w = np.asarray(weights, dtype=out.dtype)
    if w.shape != out.shape:
        raise ValidationError(f"projection weights {w.shape} do not match output {out.shape}")
    return make_result(np.asarray((out.data * w).sum(), dtype=out.dtype), (out,), lambda g: (g * w,),
                       "projection_loss")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
                   max_entries: Optional[int] = None, seed: int = 0,
                   skip: Optional[Callable[[int, int], bool]] = None) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` recomputes a scalar loss from the tensors in ``inputs``; those
    tensors are perturbed in place one entry at a time and restored
    afterwards.  With ``max_entries`` only that many randomly chosen entries
    per input are probed.  ``skip(input_index, flat_index)`` lets callers
    exclude entries sitting on a kink.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValidationError("gradient checks must run in double precision")
        t.requires_grad = True
        t.grad = None
    loss = fn()
    if loss.data.size != 1:
        raise ValidationError("gradient_check needs a scalar loss")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            if skip is not None and skip(k, int(i)):
                continue
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data.reshape(-1)[0])
            flat[i] = orig - h
            f_minus = float(fn().data.reshape(-1)[0])
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = float(relative_error(np.float64(analytic[k].reshape(-1)[i]), np.float64(numeric)))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
