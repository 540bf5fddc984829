"""Training loops for the three stages, metrics, and the fold/repeat harness."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datasets import (
    FoldPlan,
    LabeledSample,
    MixupSample,
    SampleArrays,
    build_mixup_set,
    select,
    standardize,
    to_arrays,
)
from .errors import DataError, NumericalError, UsageError, ValidationError
from .features import fit_standardizer
from .network import ModelGraph, TaskSpec, build_baseline, build_mtl, rebuild_for_finetune
from .tensorcore import adam_step, softmax_cross_entropy, weighted_sum
from .tensorcore.kernels import softmax

log = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = {"baseline_asc": 200, "baseline_aec": 500, "mtl": 200, "finetune_asc": 100, "finetune_aec": 500}


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-4
    epochs: dict = field(default_factory=lambda: dict(FULL_SCALE_EPOCHS))
    seed: int = 0
    alpha_asc: float = 0.7
    alpha_aec: float = 0.6
    mtl_loss_weights: tuple = (1.0, 1.0)
    template: str = "full"
    select_best_val: bool = False
    check_frozen: bool = False
    keep_interconnect: bool = True

    def __post_init__(self):
        self.mtl_loss_weights = tuple(self.mtl_loss_weights)
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValidationError("batch_size and learning_rate must be positive")
        if any(int(v) <= 0 for v in self.epochs.values()):
            raise ValidationError(f"epoch counts must be positive: {self.epochs}")
        if not all(np.isfinite(w) and w >= 0 for w in self.mtl_loss_weights):
            raise ValidationError(f"MTL loss weights must be finite and non-negative: {self.mtl_loss_weights}")
        for a in (self.alpha_asc, self.alpha_aec):
            if not 0.0 < a < 1.0:
                raise ValidationError(f"alpha must lie in (0, 1), got {a}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Published recipe: batch 256, Adam 1e-4, epochs 200/500/200/100/500, alpha 0.7/0.6."""
        return cls(**overrides)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Toy template, batch 32, a handful of epochs; what CI runs."""
        base = dict(batch_size=32, learning_rate=1e-3, template="toy",
                    epochs={"baseline_asc": 8, "baseline_aec": 8, "mtl": 8, "finetune_asc": 6, "finetune_aec": 6})
        base.update(overrides)
        return cls(**base)

    def task_specs(self, n_scene: int, n_event: int) -> tuple[TaskSpec, TaskSpec]:
        return TaskSpec("ASC", n_scene, self.alpha_asc), TaskSpec("AEC", n_event, self.alpha_aec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mtl_loss_weights"] = list(self.mtl_loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(d)
        if "epochs" in d:
            merged["epochs"] = {**FULL_SCALE_EPOCHS, **d["epochs"]}
        return cls(**merged)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    accuracy: dict  # task -> validation (or training) segment accuracy
    wall_time: float = 0.0

    def to_json(self, include_time: bool = False) -> str:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


def write_reports(reports: Sequence[EpochReport], path, include_time: bool = False) -> None:
    """One JSON object per line; wall time is left out unless asked for, so reruns are byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json(include_time) + "\n")


def mtl_loss(scene_logits, event_logits, scene_target, event_target, weights=(1.0, 1.0)):
    """Weighted sum of the two heads' softmax cross-entropies."""
    ls, _ = softmax_cross_entropy(scene_logits, scene_target)
    le, _ = softmax_cross_entropy(event_logits, event_target)
    return weighted_sum([ls, le], list(weights))


def frozen_digest(graph: ModelGraph) -> dict[str, str]:
    return {n: hashlib.sha256(p.data.tobytes()).hexdigest() for n, p in graph.params.items() if p.frozen}


# -- generic loop -------------------------------------------------------------------

def _targets(data: SampleArrays, graph: ModelGraph, task: str) -> np.ndarray:
    y = data.labels(task)
    if y is None:
        raise ValidationError(f"samples carry no {task} labels")
    if y.shape[1] != graph.num_classes(task):
        raise ValidationError(f"{task} labels have width {y.shape[1]}, model expects {graph.num_classes(task)}")
    return y


def _batch_loss(graph, images, targets: dict, weights: dict):
    out = graph.forward(images)
    terms = [softmax_cross_entropy(out[t], targets[t])[0] for t in targets]
    return weighted_sum(terms, [weights[t] for t in targets])


def _eval_loss_acc(graph, data: dict, batch_size: int):
    """data: task -> SampleArrays.  Mean per-task CE summed over tasks, and accuracy per task."""
    total, acc = 0.0, {}
    for task, arrays in data.items():
        y = _targets(arrays, graph, task)
        probs = graph.predict_proba(arrays.images, batch_size)[task]
        total += float(-np.mean(np.log(np.maximum((probs * y).sum(axis=1), 1e-300))))
        acc[task] = float(np.mean(probs.argmax(axis=1) == y.argmax(axis=1)))
    return total, acc


def _fit(graph: ModelGraph, data: SampleArrays, tasks: Sequence[str], config: TrainConfig, epochs: int,
         val: Optional[dict] = None, weights: Optional[dict] = None) -> list[EpochReport]:
    n = len(data)
    if n == 0:
        raise DataError("empty training set")
    weights = weights or {t: 1.0 for t in tasks}
    targets = {t: _targets(data, graph, t) for t in tasks}
    for p in graph.params.values():
        p.value.requires_grad = not p.frozen
    trainable = graph.trainable_parameters()
    if not trainable:
        raise UsageError("model has no trainable parameters")
    digest = frozen_digest(graph) if config.check_frozen else None
    rng = np.random.default_rng(config.seed)
    best, best_loss, reports = None, np.inf, []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = _batch_loss(graph, data.images[idx], {t: targets[t][idx] for t in tasks}, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            graph.zero_grad()
            loss.backward()
            adam_step(trainable, config.learning_rate)
            running += value * len(idx)
        if digest is not None and frozen_digest(graph) != digest:
            raise NumericalError(f"a frozen parameter changed during epoch {epoch}")
        if val:
            val_loss, acc = _eval_loss_acc(graph, val, config.batch_size)
        else:
            val_loss, acc = None, _eval_loss_acc(graph, {t: data for t in tasks}, config.batch_size)[1]
        reports.append(EpochReport(epoch, running / n, val_loss, acc, time.perf_counter() - t0))
        log.info("epoch %d loss %.4f val %s acc %s", epoch, running / n, val_loss, acc)
        if config.select_best_val and val_loss is not None and val_loss < best_loss:
            best_loss, best = val_loss, {k: p.data.copy() for k, p in graph.params.items()}
    if best is not None:
        for k, p in graph.params.items():
            p.value.data[...] = best[k]
    return reports


def _val_dict(val, tasks) -> Optional[dict]:
    if val is None:
        return None
    if isinstance(val, dict):
        return {t: to_arrays(v) for t, v in val.items()}
    arrays = to_arrays(val)
    return {t: arrays for t in tasks}


# -- stages -----------------------------------------------------------------------

def train_single_task(graph: ModelGraph, samples, config: TrainConfig, val_samples=None,
                      epochs: Optional[int] = None):
    """Train a baseline (or fused) model on single-task samples; returns ``(graph, reports)``."""
    if len(graph.output_tasks) != 1:
        raise UsageError(f"train_single_task needs a single-output model, got {graph.variant}")
    task = graph.output_tasks[0]
    data = to_arrays(samples)
    stage = "baseline" if graph.variant == "baseline" else "finetune"
    epochs = epochs or int(config.epochs[f"{stage}_{task.lower()}"])
    return graph, _fit(graph, data, [task], config, epochs, _val_dict(val_samples, [task]))


def train_mtl(graph: ModelGraph, mixup_samples, config: TrainConfig, val_samples=None,
              epochs: Optional[int] = None):
    """Joint training: every mixup sample supervises both heads at once."""
    if graph.variant not in ("mtl", "mtl_interconnect"):
        raise UsageError(f"train_mtl needs an MTL model, got {graph.variant}")
    data = to_arrays(mixup_samples)
    ws, we = config.mtl_loss_weights
    epochs = epochs or int(config.epochs["mtl"])
    reports = _fit(graph, data, ["ASC", "AEC"], config, epochs, _val_dict(val_samples, ["ASC", "AEC"]),
                   {"ASC": ws, "AEC": we})
    return graph, reports


def finetune(fused_graph: ModelGraph, samples, config: TrainConfig, val_samples=None,
             epochs: Optional[int] = None):
    """Train only the fusion head on the target task's original samples."""
    if fused_graph.variant != "fused_single_task":
        raise UsageError("finetune needs a model produced by rebuild_for_finetune")
    samples = samples if isinstance(samples, SampleArrays) else list(samples)
    if isinstance(samples, SampleArrays):
        both = samples.scene is not None and samples.event is not None
    else:
        both = any(isinstance(s, MixupSample) or (s.scene_label is not None and s.event_label is not None)
                   for s in samples)
    if both:
        raise UsageError("fine-tuning uses the original single-task samples, not mixup samples")
    return train_single_task(fused_graph, samples, config, val_samples, epochs)


# -- evaluation ---------------------------------------------------------------------

def vote(labels: Sequence[int]) -> int:
    """Majority label; ties go to the smallest class index."""
    counts = np.bincount(np.asarray(labels, dtype=int))
    return int(np.argmax(counts))


@dataclass
class EvalResult:
    task: str
    segment_accuracy: float
    recording_accuracy: float
    confusion: np.ndarray  # [true, predicted] segment counts
    segment_predictions: np.ndarray
    recording_predictions: dict
    recording_truth: dict
    probs: np.ndarray

    def to_dict(self) -> dict:
        return {"task": self.task, "segment_accuracy": self.segment_accuracy,
                "recording_accuracy": self.recording_accuracy, "confusion": self.confusion.tolist()}


def evaluate(graph: ModelGraph, samples, task: Optional[str] = None, batch_size: int = 256,
             recording_ids: Optional[Sequence[str]] = None) -> EvalResult:
    """Segment accuracy, per-recording accuracy (majority vote) and confusion.

    Every sample row, including each channel variant, casts one vote for its
    recording.  ``recording_ids`` overrides the grouping (used for the event
    head on mixup samples, whose event recording is not the image's own).
    """
    data = to_arrays(samples)
    if recording_ids is not None:
        data = SampleArrays(data.images, data.scene, data.event, list(recording_ids), data.segment_indices,
                            data.variants)
    task = task or graph.output_tasks[0]
    y = _targets(data, graph, task).argmax(axis=1)
    probs = graph.predict_proba(data.images, batch_size)[task]
    pred = probs.argmax(axis=1)
    n_cls = probs.shape[1]
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    by_rec: dict[str, list[int]] = {}
    truth: dict[str, int] = {}
    for rid, p, t in zip(data.recording_ids, pred, y):
        by_rec.setdefault(rid, []).append(int(p))
        if truth.setdefault(rid, int(t)) != int(t):
            raise ValidationError(f"recording {rid} has segments with different labels")
    rec_pred = {rid: vote(v) for rid, v in by_rec.items()}
    rec_acc = float(np.mean([rec_pred[r] == truth[r] for r in rec_pred]))
    return EvalResult(task, float(np.mean(pred == y)), rec_acc, confusion, pred, rec_pred, truth, probs)


def evaluate_mtl(graph: ModelGraph, mixup_samples, batch_size: int = 256) -> dict[str, EvalResult]:
    """Both heads on a mixup set; each head votes per its own source recording."""
    mixup_samples = list(mixup_samples)
    return {"ASC": evaluate(graph, mixup_samples, "ASC", batch_size,
                            [m.source_scene_id[0] for m in mixup_samples]),
            "AEC": evaluate(graph, mixup_samples, "AEC", batch_size,
                            [m.source_event_id[0] for m in mixup_samples])}


# -- fold / repeat harness ----------------------------------------------------------

STAGES = ("baseline_asc", "baseline_aec", "mtl", "mtl_ic", "finetune_asc", "finetune_aec")


@dataclass
class Protocol:
    """Data and stage for a fold-rotation experiment.

    ``scene_samples``/``event_samples`` are raw (unstandardized) samples; the
    harness fits the standardizers on each training split.
    """

    stage: str
    scene_samples: list
    event_samples: list
    scene_plan: FoldPlan
    event_plan: FoldPlan
    n_repeats: int = 3
    same_seed: bool = False  # test fixture: every repeat reuses one seed

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.scene_plan.n_folds != self.event_plan.n_folds:
            raise ValidationError("scene and event fold plans must have the same fold count")


def job_seed(base: int, fold: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base, fold, repeat]).generate_state(1)[0])


@dataclass
class FoldData:
    scene_train: list
    scene_val: list
    event_train: list
    event_val: list
    scene_stats: tuple
    event_stats: tuple


def prepare_fold(scene_samples, event_samples, scene_plan: FoldPlan, event_plan: FoldPlan, fold: int) -> FoldData:
    """Split both tasks by recording and standardize each with its own training statistics."""
    s_tr, s_va = scene_plan.split(fold)
    e_tr, e_va = event_plan.split(fold)
    parts = [select(scene_samples, s_tr), select(scene_samples, s_va),
             select(event_samples, e_tr), select(event_samples, e_va)]
    if any(len(p) == 0 for p in parts):
        raise DataError(f"fold {fold} leaves an empty train or validation split")
    s_stats = fit_standardizer(s.image for s in parts[0])
    e_stats = fit_standardizer(s.image for s in parts[2])
    return FoldData(standardize(parts[0], *s_stats), standardize(parts[1], *s_stats),
                    standardize(parts[2], *e_stats), standardize(parts[3], *e_stats), s_stats, e_stats)


@dataclass
class JobResult:
    fold: int
    repeat: int
    seed: int
    accuracy: dict  # stage -> task -> per-recording accuracy
    frozen_unchanged: Optional[bool] = None


def train_two_stage(fd: FoldData, config: TrainConfig, seed: int, with_interconnect: bool = True,
                    finetune_tasks: Sequence[str] = ("ASC", "AEC")):
    """Mixup-MTL training followed by cross-task fusion fine-tuning.

    Returns ``(mtl_graph, fused graphs by task, accuracies, frozen_unchanged)``
    where accuracies are per-recording validation accuracies keyed
    ``{"mtl": {...}, "mtl_pure": {...}, "finetune_asc": {...}, ...}``.
    The MTL heads are validated on a mixup set built from the two validation
    splits ("mtl"); "mtl_pure" feeds them the unmixed validation samples.
    """
    cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
    n_s = fd.scene_train[0].scene_label.shape[0]
    n_e = fd.event_train[0].event_label.shape[0]
    asc, aec = cfg.task_specs(n_s, n_e)
    mixed = build_mixup_set(fd.scene_train, fd.event_train, seed)
    mixed_val = build_mixup_set(fd.scene_val, fd.event_val, seed + 1)
    mtl = build_mtl(asc, aec, with_interconnect, cfg.template, seed)
    mtl.metadata["standardizer"] = {"ASC": list(fd.scene_stats), "AEC": list(fd.event_stats)}
    train_mtl(mtl, mixed, cfg)
    acc = {"mtl": {t: r.recording_accuracy for t, r in evaluate_mtl(mtl, mixed_val).items()},
           "mtl_pure": {"ASC": evaluate(mtl, fd.scene_val, "ASC").recording_accuracy,
                        "AEC": evaluate(mtl, fd.event_val, "AEC").recording_accuracy}}
    fused, unchanged = {}, True
    for task in finetune_tasks:
        g = rebuild_for_finetune(mtl, task, cfg.keep_interconnect, seed)
        before = frozen_digest(g)
        train_data, val_data = (fd.scene_train, fd.scene_val) if task == "ASC" else (fd.event_train, fd.event_val)
        finetune(g, train_data, cfg)
        unchanged &= frozen_digest(g) == before
        acc[f"finetune_{task.lower()}"] = {task: evaluate(g, val_data, task).recording_accuracy}
        fused[task] = g
    return mtl, fused, acc, unchanged


def run_job(protocol: Protocol, config: TrainConfig, fold: int, repeat: int) -> JobResult:
    seed = job_seed(config.seed, fold, 0 if protocol.same_seed else repeat)
    fd = prepare_fold(protocol.scene_samples, protocol.event_samples, protocol.scene_plan, protocol.event_plan, fold)
    cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
    stage = protocol.stage
    if stage.startswith("baseline"):
        task = stage.split("_")[1].upper()
        n_s = fd.scene_train[0].scene_label.shape[0]
        n_e = fd.event_train[0].event_label.shape[0]
        spec = cfg.task_specs(n_s, n_e)[0 if task == "ASC" else 1]
        g = build_baseline(spec, cfg.template, seed)
        train, val = (fd.scene_train, fd.scene_val) if task == "ASC" else (fd.event_train, fd.event_val)
        train_single_task(g, train, cfg)
        return JobResult(fold, repeat, seed, {stage: {task: evaluate(g, val, task).recording_accuracy}})
    if stage in ("mtl", "mtl_ic"):
        _, _, acc, _ = train_two_stage(fd, cfg, seed, stage == "mtl_ic", finetune_tasks=())
        return JobResult(fold, repeat, seed, {stage: acc["mtl"]})
    task = stage.split("_")[1].upper()
    _, _, acc, unchanged = train_two_stage(fd, cfg, seed, True, finetune_tasks=(task,))
    return JobResult(fold, repeat, seed, {stage: acc[stage], "mtl_ic": acc["mtl"]}, unchanged)


@dataclass
class ExperimentResult:
    stage: str
    runs: list  # JobResult
    mean: dict  # task -> mean over repeats of the fold-averaged accuracy
    std: dict  # task -> population std over repeats

    @staticmethod
    def summarize(stage: str, runs: list) -> "ExperimentResult":
        tasks = sorted(runs[0].accuracy[stage])
        repeats = sorted({r.repeat for r in runs})
        mean, std = {}, {}
        for t in tasks:
            per_repeat = [np.mean([r.accuracy[stage][t] for r in runs if r.repeat == k]) for k in repeats]
            mean[t], std[t] = float(np.mean(per_repeat)), float(np.std(per_repeat))
        return ExperimentResult(stage, runs, mean, std)

    def to_dict(self) -> dict:
        return {"stage": self.stage, "mean": self.mean, "std": self.std,
                "runs": [asdict(r) for r in self.runs]}


def run_experiment(protocol: Protocol, config: TrainConfig, jobs: int = 1) -> ExperimentResult:
    """Every fold as validation once, the whole rotation repeated ``n_repeats`` times."""
    grid = [(f, r) for r in range(protocol.n_repeats) for f in range(protocol.scene_plan.n_folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(run_job, *zip(*[(protocol, config, f, r) for f, r in grid])))
    else:
        runs = [run_job(protocol, config, f, r) for f, r in grid]
    return ExperimentResult.summarize(protocol.stage, runs)
