"""The four network variants and the surgery between them.

Layer indices are 1-based and follow one fixed table:

====  ======================  ==========================================
idx   layer                   scope
====  ======================  ==========================================
1-2   conv w1, conv w1        shared trunk
3     max-pool 2x2
4-5   conv w2, conv w2
6     max-pool 2x2
7-9   conv w3 x3
10    max-pool 2x2
11    conv b1                 per-task branch (duplicated in MTL models)
12    max-pool 2x2
13    conv b2
14    max-pool 2x2            inter-connection mixes the two layer-14 outputs
15    conv with P kernels     ReLU
16    global average pool     softmax over P (baseline / MTL heads)
====  ======================  ==========================================

All convolutions are 3x3, "same" padded and ReLU-activated.  Layer 15 is
initialized with down-scaled kernels and a positive bias: its input is a
non-negative activation map, so a full-size random kernel fixes each class
channel's sign over every position and roughly half of them would start
(and, under Adam, stay) switched off.  The fused
single-task variant replaces layer 16 of both branches with a dense ReLU
layer of ``fc_units`` over the flattened layer-15 output, sums the two and
feeds the sum to a new dense output layer.  That output layer also starts
with down-scaled weights: the frozen layer-15 maps of a trained model are
large, and a full-size init gives logits in the tens, which a short
fine-tune cannot walk back.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DataError, DimensionError, UsageError, ValidationError
from .tensorcore import (
    Parameter,
    Tensor,
    add,
    conv2d,
    convex_mix,
    dense,
    dtype_for,
    flatten,
    global_average_pool,
    he_normal,
    maxpool2x2,
    relu,
    softmax,
)

TASKS = ("ASC", "AEC")
VARIANTS = ("baseline", "mtl", "mtl_interconnect", "fused_single_task")
TRUNK_LAYOUT = ("conv", "conv", "pool", "conv", "conv", "pool", "conv", "conv", "conv", "pool")
BRANCH_LAYOUT = ("conv", "pool", "conv", "pool", "conv", "gap")  # layers 11..16
CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1
_STREAMS = {"shared": 0, "asc": 1, "aec": 2, "asc.fc": 3, "aec.fc": 4, "output": 5}
CLASS_CONV_WEIGHT_SCALE = 0.1
CLASS_CONV_BIAS = 0.5
FUSION_OUTPUT_WEIGHT_SCALE = 0.01


@dataclass(frozen=True)
class TaskSpec:
    task: str
    num_classes: int
    alpha: float = 0.7

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie strictly between 0 and 1, got {self.alpha}")

    @property
    def branch(self) -> str:
        return self.task.lower()


@dataclass(frozen=True)
class ArchitectureTemplate:
    name: str
    bands: int
    frames: int
    trunk_widths: tuple = (32, 32, 64, 64, 128, 128, 128)
    branch_widths: tuple = (256, 256)
    fc_units: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(self.trunk_widths))
        object.__setattr__(self, "branch_widths", tuple(self.branch_widths))
        if len(self.trunk_widths) != 7 or len(self.branch_widths) != 2:
            raise ValidationError("a template needs 7 trunk conv widths and 2 branch conv widths")
        if self.bands % 32 or self.frames % 32:
            raise ValidationError(f"input {self.bands}x{self.frames} must be divisible by 32 (five 2x2 pools)")

    @property
    def h15_size(self) -> int:
        """Spatial positions left after the five pools."""
        return (self.bands // 32) * (self.frames // 32)

    def layer_table(self, num_classes: int) -> list[dict]:
        """Rows ``{index, kind, scope, cin, cout}`` for a single-branch model."""
        rows, cin, widths = [], 1, iter(self.trunk_widths)
        for i, kind in enumerate(TRUNK_LAYOUT, start=1):
            cout = next(widths) if kind == "conv" else cin
            rows.append(dict(index=i, kind=kind, scope="shared", cin=cin, cout=cout))
            cin = cout
        bw = iter(self.branch_widths + (num_classes,))
        for i, kind in enumerate(BRANCH_LAYOUT, start=11):
            cout = next(bw) if kind == "conv" else cin
            rows.append(dict(index=i, kind=kind, scope="branch", cin=cin, cout=cout))
            cin = cout
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"], d["branch_widths"] = list(self.trunk_widths), list(self.branch_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureTemplate":
        return cls(**d)


FULL_TEMPLATE = ArchitectureTemplate("full", 128, 128)
TOY_TEMPLATE = ArchitectureTemplate("toy", 32, 32, (8, 8, 16, 16, 32, 32, 32), (64, 64), 64)
TEMPLATES = {"full": FULL_TEMPLATE, "toy": TOY_TEMPLATE}


def get_template(template) -> ArchitectureTemplate:
    if isinstance(template, ArchitectureTemplate):
        return template
    try:
        return TEMPLATES[template]
    except KeyError:
        raise ValidationError(f"unknown template {template!r}; known: {sorted(TEMPLATES)}") from None


def interconnect_forward(h14_s: Tensor, h14_e: Tensor, alpha_s: float, alpha_e: float) -> tuple[Tensor, Tensor]:
    """Cross-branch convex mixing of the layer-14 activations (parameter free)."""
    if h14_s.shape != h14_e.shape:
        raise DimensionError(f"inter-connection needs equal shapes, got {h14_s.shape} and {h14_e.shape}")
    return convex_mix(h14_s, h14_e, alpha_s), convex_mix(h14_e, h14_s, alpha_e)


class ModelGraph:
    """Named parameter store plus the forward pass of one variant.

    ``alphas`` maps task name to the inter-connection weight that branch keeps
    of its own activation.  It is read at every forward call, so tests may
    override it (e.g. to 1.0) without touching the TaskSpecs.
    """

    def __init__(self, template: ArchitectureTemplate, variant: str, tasks: tuple,
                 params: dict, interconnect: bool = False, target_task: Optional[str] = None,
                 metadata: Optional[dict] = None):
        if variant not in VARIANTS:
            raise ValidationError(f"unknown variant {variant!r}")
        self.template = template
        self.variant = variant
        self.tasks = tuple(tasks)
        self.params: dict[str, Parameter] = params
        self.interconnect = interconnect
        self.target_task = target_task
        self.alphas = {t.task: t.alpha for t in self.tasks}
        self.metadata = dict(metadata or {})

    # -- inspection ---------------------------------------------------------

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).data.dtype

    @property
    def output_tasks(self) -> tuple[str, ...]:
        if self.variant == "fused_single_task":
            return (self.target_task,)
        return tuple(t.task for t in self.tasks)

    def task_spec(self, task: str) -> TaskSpec:
        for t in self.tasks:
            if t.task == task:
                return t
        raise ValidationError(f"model has no {task} task")

    def num_classes(self, task: str) -> int:
        return self.task_spec(task).num_classes

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.params.values() if not p.frozen]

    @property
    def freeze_mask(self) -> dict[str, bool]:
        return {n: p.frozen for n, p in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self, precision: Optional[str] = None) -> "ModelGraph":
        dt = self.dtype if precision is None else dtype_for(precision)
        params = {n: Parameter(n, Tensor(p.data.astype(dt, copy=True)), frozen=p.frozen)
                  for n, p in self.params.items()}
        g = ModelGraph(self.template, self.variant, self.tasks, params, self.interconnect, self.target_task,
                       self.metadata)
        g.alphas = dict(self.alphas)
        return g

    # -- forward --------------------------------------------------------------

    def _conv(self, h: Tensor, scope: str, index: int) -> Tensor:
        w, b = self.params[f"{scope}.conv{index}.weight"], self.params[f"{scope}.conv{index}.bias"]
        return relu(conv2d(h, w.value, b.value))

    def _as_input(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim == 3:
            data = data[..., None]
        expected = (self.template.bands, self.template.frames, 1)
        if data.ndim != 4 or data.shape[1:] != expected:
            raise DimensionError(f"model input must be [B, {expected[0]}, {expected[1]}(, 1)]; got {data.shape}")
        if isinstance(x, Tensor) and x.dtype == self.dtype and x.data.ndim == 4:
            return x
        return Tensor(data.astype(self.dtype, copy=False))

    def trunk(self, x) -> Tensor:
        h = self._as_input(x)
        for i, kind in enumerate(TRUNK_LAYOUT, start=1):
            h = self._conv(h, "shared", i) if kind == "conv" else maxpool2x2(h)
        return h

    def forward(self, x) -> dict[str, Tensor]:
        """Logits per output task (softmax is applied by the loss)."""
        shared = self.trunk(x)
        h14 = {}
        for t in self.tasks:
            h = self._conv(shared, t.branch, 11)
            h = maxpool2x2(h)
            h = self._conv(h, t.branch, 13)
            h14[t.task] = maxpool2x2(h)
        if self.interconnect:
            h14["ASC"], h14["AEC"] = interconnect_forward(h14["ASC"], h14["AEC"], self.alphas["ASC"],
                                                          self.alphas["AEC"])
        h15 = {t.task: self._conv(h14[t.task], t.branch, 15) for t in self.tasks}
        if self.variant != "fused_single_task":
            return {task: global_average_pool(h) for task, h in h15.items()}
        h16 = [relu(dense(flatten(h15[t.task]), self.params[f"{t.branch}.fc16.weight"].value,
                          self.params[f"{t.branch}.fc16.bias"].value)) for t in self.tasks]
        fused = add(h16[0], h16[1])
        out = dense(fused, self.params["output.weight"].value, self.params["output.bias"].value)
        return {self.target_task: out}

    def predict_proba(self, images, batch_size: int = 256) -> dict[str, np.ndarray]:
        images = np.asarray(images)
        chunks: dict[str, list] = {t: [] for t in self.output_tasks}
        for start in range(0, images.shape[0], batch_size):
            for task, logits in self.forward(images[start:start + batch_size]).items():
                chunks[task].append(softmax(logits.data.astype(np.float64)))
        return {t: np.concatenate(c) for t, c in chunks.items()}


# -- builders -------------------------------------------------------------------

def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[stream]])


def _add_conv(params, rng, name, cin, cout, dtype, k=3, weight_scale=1.0, bias=0.0):
    w = he_normal(rng, (k, k, cin, cout), k * k * cin, dtype) * dtype.type(weight_scale)
    params[f"{name}.weight"] = Parameter(f"{name}.weight", Tensor(w))
    params[f"{name}.bias"] = Parameter(f"{name}.bias", Tensor(np.full(cout, bias, dtype=dtype)))


def _add_dense(params, rng, name, nin, nout, dtype, weight_scale=1.0):
    w = he_normal(rng, (nin, nout), nin, dtype) * dtype.type(weight_scale)
    params[f"{name}.weight"] = Parameter(f"{name}.weight", Tensor(w))
    params[f"{name}.bias"] = Parameter(f"{name}.bias", Tensor(np.zeros(nout, dtype=dtype)))


def _trunk_params(template, seed, dtype) -> dict:
    params, rng = {}, _rng(seed, "shared")
    for row in template.layer_table(1)[:10]:
        if row["kind"] == "conv":
            _add_conv(params, rng, f"shared.conv{row['index']}", row["cin"], row["cout"], dtype)
    return params


def _branch_params(params, template, spec: TaskSpec, seed, dtype) -> None:
    rng = _rng(seed, spec.branch)
    for row in template.layer_table(spec.num_classes)[10:]:
        if row["kind"] == "conv":
            extra = dict(weight_scale=CLASS_CONV_WEIGHT_SCALE, bias=CLASS_CONV_BIAS) if row["index"] == 15 else {}
            _add_conv(params, rng, f"{spec.branch}.conv{row['index']}", row["cin"], row["cout"], dtype, **extra)


def build_baseline(task_spec: TaskSpec, template="toy", seed: int = 0, precision: str = "single") -> ModelGraph:
    template, dtype = get_template(template), dtype_for(precision)
    params = _trunk_params(template, seed, dtype)
    _branch_params(params, template, task_spec, seed, dtype)
    return ModelGraph(template, "baseline", (task_spec,), params)


def build_mtl(asc_spec: TaskSpec, aec_spec: TaskSpec, with_interconnect: bool, template="toy", seed: int = 0,
              precision: str = "single") -> ModelGraph:
    if (asc_spec.task, aec_spec.task) != ("ASC", "AEC"):
        raise ValidationError("build_mtl expects an ASC spec followed by an AEC spec")
    template, dtype = get_template(template), dtype_for(precision)
    params = _trunk_params(template, seed, dtype)
    _branch_params(params, template, asc_spec, seed, dtype)
    _branch_params(params, template, aec_spec, seed, dtype)
    variant = "mtl_interconnect" if with_interconnect else "mtl"
    return ModelGraph(template, variant, (asc_spec, aec_spec), params, interconnect=with_interconnect)


def _add_fusion_head(params, template, tasks, target: TaskSpec, seed, dtype) -> None:
    for t in tasks:
        _add_dense(params, _rng(seed, f"{t.branch}.fc"), f"{t.branch}.fc16", template.h15_size * t.num_classes,
                   template.fc_units, dtype)
    _add_dense(params, _rng(seed, "output"), "output", template.fc_units, target.num_classes, dtype,
               weight_scale=FUSION_OUTPUT_WEIGHT_SCALE)


def rebuild_for_finetune(mtl_graph: ModelGraph, target_task: str, keep_interconnect: bool = True,
                         seed: int = 0) -> ModelGraph:
    """Cross-task fusion model built on a trained MTL model.

    Every MTL parameter (layers 1-15 of both branches) is copied and frozen;
    a fresh dense layer per branch and a fresh output layer of the target
    task's width are the only trainable parameters.
    """
    if mtl_graph.variant not in ("mtl", "mtl_interconnect"):
        raise UsageError(f"fine-tune surgery needs an MTL model, got variant {mtl_graph.variant!r}")
    target = mtl_graph.task_spec(target_task.upper())
    dtype = mtl_graph.dtype
    params = {n: Parameter(n, Tensor(p.data.copy()), frozen=True) for n, p in mtl_graph.params.items()}
    _add_fusion_head(params, mtl_graph.template, mtl_graph.tasks, target, seed, dtype)
    g = ModelGraph(mtl_graph.template, "fused_single_task", mtl_graph.tasks, params,
                   interconnect=mtl_graph.interconnect and keep_interconnect, target_task=target.task,
                   metadata=mtl_graph.metadata)
    g.alphas = dict(mtl_graph.alphas)
    return g


def build_fused(asc_spec: TaskSpec, aec_spec: TaskSpec, target_task: str, with_interconnect: bool = True,
                template="toy", seed: int = 0, precision: str = "single") -> ModelGraph:
    """Fused single-task model with every layer trainable (direct training)."""
    mtl = build_mtl(asc_spec, aec_spec, with_interconnect, template, seed, precision)
    g = rebuild_for_finetune(mtl, target_task, seed=seed)
    for p in g.params.values():
        p.frozen = False
    return g


# -- checkpoints ----------------------------------------------------------------

def _skeleton(header: dict) -> ModelGraph:
    template = ArchitectureTemplate.from_dict(header["template"])
    tasks = [TaskSpec(**t) for t in header["tasks"]]
    variant = header["variant"]
    if variant == "baseline":
        g = build_baseline(tasks[0], template)
    elif variant in ("mtl", "mtl_interconnect"):
        g = build_mtl(tasks[0], tasks[1], variant == "mtl_interconnect", template)
    elif variant == "fused_single_task":
        g = rebuild_for_finetune(build_mtl(tasks[0], tasks[1], True, template), header["target_task"])
        g.interconnect = header["interconnect"]
    else:
        raise DataError(f"checkpoint has unknown variant {variant!r}")
    return g


def checkpoint_header(graph: ModelGraph) -> dict:
    return {
        "template": graph.template.to_dict(),
        "variant": graph.variant,
        "tasks": [asdict(t) for t in graph.tasks],
        "alphas": graph.alphas,
        "interconnect": graph.interconnect,
        "target_task": graph.target_task,
        "freeze_mask": graph.freeze_mask,
        "metadata": graph.metadata,
    }


def save_checkpoint(graph: ModelGraph, path) -> None:
    header = json.dumps(checkpoint_header(graph), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header)
        fh.write(struct.pack("<I", len(graph.params)))
        for name, p in graph.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, expected_template=None) -> ModelGraph:
    """Read a checkpoint and validate it against its embedded architecture.

    With ``expected_template`` the stored template must also match it.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    if expected_template is not None:
        want = get_template(expected_template).to_dict()
        if header["template"] != want:
            raise ValidationError(f"{path}: checkpoint template {header['template']} does not match expected {want}")
    graph = _skeleton(header)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (rank,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
        pos += 1 + 4 * rank
        size = int(np.prod(shape))
        values = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
        if name not in graph.params:
            raise ValidationError(f"{path}: tensor {name!r} is not part of the {header['variant']} architecture")
        if graph.params[name].shape != tuple(shape):
            raise ValidationError(f"{path}: tensor {name!r} has shape {tuple(shape)}, architecture expects "
                                  f"{graph.params[name].shape}")
        graph.params[name] = Parameter(name, Tensor(values), frozen=bool(header["freeze_mask"][name]))
        seen.add(name)
    missing = set(graph.params) - seen
    if missing:
        raise ValidationError(f"{path}: checkpoint lacks tensors {sorted(missing)}")
    graph.alphas = {k: float(v) for k, v in header["alphas"].items()}
    graph.metadata = header.get("metadata", {})
    return graph
