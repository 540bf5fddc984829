from __future__ import annotations

from typing import Iterable

import numpy as np

from ..errors import UsageError
from .tensor import Parameter


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every non-frozen parameter, in place.

    Frozen parameters are skipped entirely: value, moments and step count stay
    as they were.
    """
    params = list(params)
    missing = [p.name for p in params if not p.frozen and p.grad is None]
    if missing:
        raise UsageError(f"adam_step: unfrozen parameters without a gradient: {missing}")
    for p in params:
        if p.frozen:
            continue
        g = p.grad
        dt = p.data.dtype.type
        p.step_count += 1
        t = p.step_count
        p.adam_m *= dt(beta1)
        p.adam_m += dt(1.0 - beta1) * g
        p.adam_v *= dt(beta2)
        p.adam_v += dt(1.0 - beta2) * (g * g)
        m_hat = p.adam_m / dt(1.0 - beta1 ** t)
        v_hat = p.adam_v / dt(1.0 - beta2 ** t)
        p.value.data -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
