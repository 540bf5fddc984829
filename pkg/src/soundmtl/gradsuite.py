"""Double-precision finite-difference checks for every layer primitive and
for whole toy-template models."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datasets import make_one_hot
from .network import TaskSpec, build_baseline, build_fused, build_mtl, interconnect_forward
from .tensorcore import (
    Tensor,
    add,
    conv2d,
    convex_mix,
    dense,
    flatten,
    global_average_pool,
    gradient_check,
    maxpool2x2,
    projection_loss,
    relu,
    softmax_cross_entropy,
)

LAYER_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: max relative error {self.max_error:.3e} (< {self.tolerance:g})"


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def layer_checks(seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    def run(name, fn, inputs, skip=None):
        out.append(CheckResult(name, gradient_check(fn, inputs, h=h, skip=skip), LAYER_TOLERANCE))

    x, k, b = _t(rng, 2, 5, 6, 3), _t(rng, 3, 3, 3, 4), _t(rng, 4)
    w = rng.normal(size=(2, 5, 6, 4))
    run("conv2d", lambda: projection_loss(conv2d(x, k, b), w), [x, k, b])

    x = _t(rng, 2, 4, 6, 3)
    w = rng.normal(size=(2, 2, 3, 3))
    run("maxpool2x2", lambda: projection_loss(maxpool2x2(x), w), [x])

    x, wt, b = _t(rng, 3, 5), _t(rng, 5, 4), _t(rng, 4)
    w = rng.normal(size=(3, 4))
    run("dense", lambda: projection_loss(dense(x, wt, b), w), [x, wt, b])

    x = _t(rng, 4, 7)
    w = rng.normal(size=(4, 7))
    near = np.abs(x.data.reshape(-1)) < 10 * h
    run("relu", lambda: projection_loss(relu(x), w), [x], skip=lambda _k, i: bool(near[i]))

    x = _t(rng, 2, 3, 4, 5)
    w = rng.normal(size=(2, 5))
    run("global_average_pool", lambda: projection_loss(global_average_pool(x), w), [x])

    x = _t(rng, 2, 3, 4)
    w = rng.normal(size=(2, 12))
    run("flatten", lambda: projection_loss(flatten(x), w), [x])

    a, c = _t(rng, 3, 4), _t(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    run("add", lambda: projection_loss(add(a, c), w), [a, c])
    run("convex_mix", lambda: projection_loss(convex_mix(a, c, 0.7), w), [a, c])

    hs, he = _t(rng, 2, 2, 2, 3), _t(rng, 2, 2, 2, 3)
    ws, we = rng.normal(size=(2, 2, 2, 3)), rng.normal(size=(2, 2, 2, 3))

    def ic_loss():
        ms, me = interconnect_forward(hs, he, 0.7, 0.6)
        return add(projection_loss(ms, ws), projection_loss(me, we))

    run("interconnect", ic_loss, [hs, he])

    logits = _t(rng, 4, 6)
    target = np.stack([make_one_hot(int(i), 6) for i in rng.integers(0, 6, size=4)]).astype(np.float64)
    run("softmax_cross_entropy", lambda: softmax_cross_entropy(logits, target)[0], [logits])
    return out


def model_gradient_errors(graph, images: np.ndarray, targets: dict, h: float = 1e-6,
                          max_entries: Optional[int] = 12, seed: int = 0) -> dict[str, float]:
    """Worst relative error per parameter tensor for the summed cross-entropy of ``targets``."""

    def loss():
        logits = graph.forward(images)
        terms = [softmax_cross_entropy(logits[t], y)[0] for t, y in targets.items()]
        total = terms[0]
        for term in terms[1:]:
            total = add(total, term)
        return total

    return {name: gradient_check(loss, [p.value], h=h, max_entries=max_entries, seed=seed)
            for name, p in graph.params.items()}


def model_checks(template: str = "toy", seed: int = 0, batch: int = 2, max_entries: Optional[int] = 12,
                 n_scene: int = 3, n_event: int = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    asc, aec = TaskSpec("ASC", n_scene, 0.7), TaskSpec("AEC", n_event, 0.6)
    graphs = {
        "baseline": build_baseline(asc, template, seed, "double"),
        "mtl": build_mtl(asc, aec, False, template, seed, "double"),
        "mtl_interconnect": build_mtl(asc, aec, True, template, seed, "double"),
        "fused": build_fused(asc, aec, "ASC", True, template, seed, "double"),
    }
    out = []
    for name, g in graphs.items():
        images = rng.normal(size=(batch, g.template.bands, g.template.frames))
        targets = {t: np.stack([make_one_hot(int(i), g.num_classes(t))
                                for i in rng.integers(0, g.num_classes(t), size=batch)]).astype(np.float64)
                   for t in g.output_tasks}
        errors = model_gradient_errors(g, images, targets, max_entries=max_entries, seed=seed)
        out.append(CheckResult(f"{name} model ({len(errors)} tensors)", max(errors.values()), MODEL_TOLERANCE))
    return out


def run_suite(template: str = "toy", seed: int = 0, max_entries: Optional[int] = 12) -> tuple[list[CheckResult], float]:
    """All layer checks then all model checks; returns the results and wall time in seconds."""
    t0 = time.perf_counter()
    results = layer_checks(seed) + model_checks(template, seed, max_entries=max_entries)
    return results, time.perf_counter() - t0
