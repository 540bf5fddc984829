import json
import math

import numpy as np
import pytest

from oracles import majority_vote
from soundmtl.datasets import FoldPlan, LabeledSample, build_mixup_set, make_one_hot, to_arrays
from soundmtl.errors import DataError, NumericalError, UsageError, ValidationError
from soundmtl.features import SpectrogramImage
from soundmtl.gradsuite import model_gradient_errors
from soundmtl.network import TaskSpec, build_baseline, build_mtl, rebuild_for_finetune, save_checkpoint
from soundmtl.tensorcore import Tensor, gradient_check, softmax_cross_entropy
import soundmtl.training as training
from soundmtl.training import (
    EpochReport,
    ExperimentResult,
    Protocol,
    TrainConfig,
    evaluate,
    finetune,
    frozen_digest,
    job_seed,
    mtl_loss,
    run_experiment,
    train_mtl,
    train_single_task,
    vote,
    write_reports,
)

ASC3, AEC4 = TaskSpec("ASC", 3, 0.7), TaskSpec("AEC", 4, 0.6)


def toy_samples(task, n_cls, per_class, seed=0, segments=1, prefix=None):
    """Noise images with a class-specific bright horizontal band; ``segments`` rows per recording."""
    rng = np.random.default_rng(seed)
    prefix = prefix or task.lower()
    out = []
    for c in range(n_cls):
        for r in range(per_class):
            rid = f"{prefix}_{c}_{r}"
            for s in range(segments):
                img = rng.normal(0, 0.5, size=(32, 32)).astype(np.float32)
                rows = slice(c * 32 // n_cls, (c + 1) * 32 // n_cls)
                img[rows] += 1.5
                label = make_one_hot(c, n_cls)
                kw = {"scene_label": label} if task == "ASC" else {"event_label": label}
                out.append(LabeledSample(SpectrogramImage(img, "left", rid, s), **kw))
    return out


def _cfg(**kw):
    base = dict(epochs={"baseline_asc": 2, "baseline_aec": 2, "mtl": 2, "finetune_asc": 2, "finetune_aec": 2})
    base.update(kw)
    return TrainConfig.desk_scale(**base)


def _mean_ce(graph, samples, task):
    data = to_arrays(samples)
    probs = graph.predict_proba(data.images)[task]
    y = data.labels(task)
    return float(-np.mean(np.log((probs * y).sum(axis=1))))


class TestConfig:
    def test_full_scale_values(self):
        c = TrainConfig.full_scale()
        assert (c.batch_size, c.learning_rate, c.alpha_asc, c.alpha_aec) == (256, 1e-4, 0.7, 0.6)
        assert c.epochs == {"baseline_asc": 200, "baseline_aec": 500, "mtl": 200, "finetune_asc": 100,
                            "finetune_aec": 500}
        assert c.mtl_loss_weights == (1.0, 1.0)

    def test_desk_defaults(self):
        c = TrainConfig.desk_scale()
        assert c.batch_size == 32 and c.template == "toy"

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": -1.0}, {"alpha_asc": 1.0},
                                    {"mtl_loss_weights": (1.0, float("nan"))}, {"epochs": {"mtl": 0}}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        c = TrainConfig.desk_scale(seed=5)
        assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            TrainConfig.from_dict({"momentum": 0.9})


class TestLoss:
    def test_weight_zero_drops_event_term(self):
        rng = np.random.default_rng(0)
        ls, le = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 5)))
        ys, ye = np.eye(3)[[0, 1, 2, 0]], np.eye(5)[[4, 3, 2, 1]]
        scene_only, _ = softmax_cross_entropy(ls, ys)
        assert float(mtl_loss(ls, le, ys, ye, (1.0, 0.0)).data) == float(scene_only.data)

    def test_uniform_logits(self):
        ls, le = Tensor(np.zeros((6, 15))), Tensor(np.zeros((6, 50)))
        ys, ye = np.eye(15)[[0, 3, 7, 14, 2, 2]], np.eye(50)[[0, 9, 49, 13, 7, 7]]
        value = float(mtl_loss(ls, le, ys, ye).data)
        assert value == pytest.approx(math.log(15) + math.log(50), abs=1e-12)
        assert round(value, 3) == 6.620

    def test_gradient_on_toy_model(self):
        rng = np.random.default_rng(1)
        g = build_mtl(ASC3, AEC4, True, "toy", seed=2, precision="double")
        x = rng.normal(size=(2, 32, 32))
        ys, ye = np.eye(3)[[0, 2]], np.eye(4)[[3, 1]]

        def loss():
            out = g.forward(x)
            return mtl_loss(out["ASC"], out["AEC"], ys, ye)

        worst = max(gradient_check(loss, [p.value], h=1e-6, max_entries=6) for p in g.params.values())
        assert worst < 1e-4

    def test_model_errors_cover_every_tensor(self):
        g = build_baseline(ASC3, "toy", 0, "double")
        errs = model_gradient_errors(g, np.random.default_rng(0).normal(size=(2, 32, 32)),
                                     {"ASC": np.eye(3)[[1, 2]]}, max_entries=2)
        assert set(errs) == set(g.params) and max(errs.values()) < 1e-4


class TestSingleTask:
    def test_first_epoch_lowers_loss(self):
        data = toy_samples("ASC", 3, 12, seed=3)
        wins = 0
        for seed in range(5):
            g = build_baseline(ASC3, "toy", seed)
            before = _mean_ce(g, data, "ASC")
            train_single_task(g, data, _cfg(seed=seed), epochs=1)
            wins += _mean_ce(g, data, "ASC") < before
        assert wins >= 3

    def test_same_seed_identical_bits(self, tmp_path):
        data = toy_samples("AEC", 4, 5, seed=4)
        outs = []
        for k in range(2):
            g = build_baseline(AEC4, "toy", 7)
            _, reps = train_single_task(g, data, _cfg(seed=7))
            save_checkpoint(g, tmp_path / f"m{k}.smck")
            write_reports(reps, tmp_path / f"r{k}.jsonl")
            outs.append(((tmp_path / f"m{k}.smck").read_bytes(), (tmp_path / f"r{k}.jsonl").read_bytes()))
        assert outs[0] == outs[1]

    def test_reports_valid(self):
        data = toy_samples("ASC", 3, 4)
        _, reps = train_single_task(build_baseline(ASC3, "toy", 0), data, _cfg(), val_samples=data)
        assert [r.epoch for r in reps] == [1, 2]
        for r in reps:
            assert np.isfinite(r.train_loss) and np.isfinite(r.val_loss)
            assert all(0.0 <= a <= 1.0 for a in r.accuracy.values())
            assert "wall_time" not in json.loads(r.to_json())
            assert "wall_time" in json.loads(r.to_json(include_time=True))

    def test_empty(self):
        with pytest.raises(DataError):
            train_single_task(build_baseline(ASC3, "toy", 0), [], _cfg())

    def test_label_width(self):
        data = toy_samples("ASC", 2, 3)
        with pytest.raises(ValidationError):
            train_single_task(build_baseline(ASC3, "toy", 0), data, _cfg())

    def test_missing_labels(self):
        data = toy_samples("AEC", 3, 3)
        with pytest.raises(ValidationError):
            train_single_task(build_baseline(ASC3, "toy", 0), data, _cfg())

    def test_best_val_selection(self):
        train, val = toy_samples("ASC", 3, 6, seed=1), toy_samples("ASC", 3, 3, seed=2)
        g = build_baseline(ASC3, "toy", 0)
        _, reps = train_single_task(g, train, _cfg(select_best_val=True), val_samples=val, epochs=4)
        best = min(r.val_loss for r in reps)
        assert _mean_ce(g, val, "ASC") == pytest.approx(best, rel=1e-5)

    def test_mtl_model_rejected(self):
        with pytest.raises(UsageError):
            train_single_task(build_mtl(ASC3, AEC4, False), toy_samples("ASC", 3, 2), _cfg())


def _toy_mixup(seed=0, per_class=8):
    return build_mixup_set(toy_samples("ASC", 3, per_class, seed), toy_samples("AEC", 4, per_class, seed + 1), seed)


class TestMTL:
    def test_loss_decreases_first_five_epochs(self):
        mixed = _toy_mixup()
        monotone = 0
        for seed in range(5):
            _, reps = train_mtl(build_mtl(ASC3, AEC4, True, "toy", seed), mixed, _cfg(seed=seed), epochs=5)
            losses = [r.train_loss for r in reps]
            monotone += all(b < a for a, b in zip(losses, losses[1:]))
        assert monotone >= 3

    def test_requires_both_labels(self):
        with pytest.raises(ValidationError):
            train_mtl(build_mtl(ASC3, AEC4, False), toy_samples("ASC", 3, 2), _cfg())

    def test_baseline_rejected(self):
        with pytest.raises(UsageError):
            train_mtl(build_baseline(ASC3), _toy_mixup(), _cfg())

    def test_event_label_ablation(self, desk_data):
        from soundmtl.training import evaluate_mtl, prepare_fold

        fd = prepare_fold(desk_data.scene_samples, desk_data.event_samples, desk_data.scene_plan,
                          desk_data.event_plan, 0)
        rng = np.random.default_rng(0)
        # shuffle labels per recording so a recording's segments still agree
        rids = sorted({s.recording_id for s in fd.event_train})
        new = dict(zip(rids, rng.permutation([next(s.event_label for s in fd.event_train if s.recording_id == r)
                                               for r in rids])))
        shuffled = [LabeledSample(s.image, event_label=new[s.recording_id]) for s in fd.event_train]
        g = build_mtl(ASC3, AEC4, False, "toy", 0)
        train_mtl(g, build_mixup_set(fd.scene_train, shuffled, 0), _cfg(epochs={"mtl": 6}))
        res = evaluate_mtl(g, build_mixup_set(fd.scene_val, fd.event_val, 1))
        assert res["ASC"].segment_accuracy > 0.9
        assert res["AEC"].segment_accuracy < 0.45


class TestFinetune:
    def _trained_mtl(self):
        g = build_mtl(ASC3, AEC4, True, "toy", 0)
        train_mtl(g, _toy_mixup(), _cfg())
        return g

    def test_frozen_bits_unchanged(self):
        mtl = self._trained_mtl()
        fused = rebuild_for_finetune(mtl, "ASC")
        before = frozen_digest(fused)
        head = {n: p.data.copy() for n, p in fused.params.items() if not p.frozen}
        finetune(fused, toy_samples("ASC", 3, 6), _cfg(check_frozen=True))
        assert frozen_digest(fused) == before
        for n, p in fused.params.items():
            if p.frozen:
                np.testing.assert_array_equal(p.data, mtl.params[n].data)
        assert any(not np.array_equal(fused.params[n].data, v) for n, v in head.items())

    def test_rejects_mixup_samples(self):
        fused = rebuild_for_finetune(build_mtl(ASC3, AEC4, True), "ASC")
        with pytest.raises(UsageError):
            finetune(fused, _toy_mixup(), _cfg())

    def test_rejects_non_fused(self):
        with pytest.raises(UsageError):
            finetune(build_baseline(ASC3), toy_samples("ASC", 3, 2), _cfg())

    def test_frozen_write_detected(self, monkeypatch):
        fused = rebuild_for_finetune(build_mtl(ASC3, AEC4, True), "AEC")
        real = training.adam_step

        def leaky(params, lr, *a, **k):
            real(params, lr, *a, **k)
            fused.params["shared.conv1.bias"].data[0] += 1.0

        monkeypatch.setattr(training, "adam_step", leaky)
        with pytest.raises(NumericalError):
            finetune(fused, toy_samples("AEC", 4, 2), _cfg(check_frozen=True))


class FixedGraph:
    """Stands in for a model: the class predicted for an image is stored in its first pixel."""

    output_tasks = ("ASC",)

    def __init__(self, n_cls):
        self.n_cls = n_cls

    def num_classes(self, task):
        return self.n_cls

    def predict_proba(self, images, batch_size=256):
        pred = np.asarray(images)[:, 0, 0].astype(int)
        probs = np.full((len(pred), self.n_cls), 0.1 / (self.n_cls - 1))
        probs[np.arange(len(pred)), pred] = 0.9
        return {"ASC": probs}


def _fixed_samples(rows):
    """rows: (recording_id, true_class, predicted_class)."""
    out = []
    for k, (rid, truth, pred) in enumerate(rows):
        img = np.zeros((2, 2), dtype=np.float32)
        img[0, 0] = pred
        out.append(LabeledSample(SpectrogramImage(img, "left", rid, k), scene_label=make_one_hot(truth, 6)))
    return out


class TestEvaluate:
    def test_vote_examples(self):
        assert vote([2, 2, 5]) == 2
        assert vote([1, 2]) == 1
        assert vote([4]) == 4

    def test_recording_vote(self):
        res = evaluate(FixedGraph(6), _fixed_samples([("r", 2, 2), ("r", 2, 2), ("r", 2, 5)]))
        assert res.recording_predictions == {"r": 2}
        assert res.recording_accuracy == 1.0
        assert res.segment_accuracy == pytest.approx(2 / 3)

    def test_single_segment_recordings(self):
        rng = np.random.default_rng(0)
        rows = [(f"r{i}", int(rng.integers(6)), int(rng.integers(6))) for i in range(40)]
        res = evaluate(FixedGraph(6), _fixed_samples(rows))
        assert res.recording_accuracy == res.segment_accuracy

    def test_confusion_rows_and_oracle(self):
        rng = np.random.default_rng(1)
        rows = []
        for r in range(15):
            truth = int(rng.integers(6))
            rows += [(f"r{r}", truth, int(rng.integers(6))) for _ in range(int(rng.integers(1, 6)))]
        res = evaluate(FixedGraph(6), _fixed_samples(rows))
        counts = np.bincount([t for _, t, _ in rows], minlength=6)
        assert res.confusion.sum(axis=1).tolist() == counts.tolist()
        # brute-force per-recording accuracy from raw argmaxes
        rids = sorted({r for r, _, _ in rows})
        correct = 0
        for rid in rids:
            seg = [(t, p) for r, t, p in rows if r == rid]
            correct += majority_vote([p for _, p in seg]) == seg[0][0]
        assert res.recording_accuracy == pytest.approx(correct / len(rids), abs=1e-15)

    def test_inconsistent_recording_labels(self):
        with pytest.raises(ValidationError):
            evaluate(FixedGraph(6), _fixed_samples([("r", 1, 1), ("r", 2, 2)]))


def _tiny_protocol(stage="baseline_asc", same_seed=False):
    scenes = toy_samples("ASC", 3, 4, seed=0, segments=2)
    events = toy_samples("AEC", 4, 4, seed=1, segments=2)
    s_plan = FoldPlan({s.recording_id: int(s.recording_id.split("_")[2]) % 4 for s in scenes})
    e_plan = FoldPlan({s.recording_id: int(s.recording_id.split("_")[2]) % 4 for s in events})
    return Protocol(stage, scenes, events, s_plan, e_plan, n_repeats=3, same_seed=same_seed)


class TestExperiment:
    def test_twelve_runs_and_mean(self):
        res = run_experiment(_tiny_protocol(), _cfg(epochs={"baseline_asc": 1}))
        assert len(res.runs) == 12
        assert sorted((r.fold, r.repeat) for r in res.runs) == [(f, r) for f in range(4) for r in range(3)]
        per_repeat = [np.mean([r.accuracy["baseline_asc"]["ASC"] for r in res.runs if r.repeat == k])
                      for k in range(3)]
        assert abs(res.mean["ASC"] - sum(per_repeat) / 3) < 1e-9
        assert abs(res.std["ASC"] - float(np.sqrt(np.mean((np.array(per_repeat) - res.mean["ASC"]) ** 2)))) < 1e-12

    def test_same_seed_zero_std(self):
        res = run_experiment(_tiny_protocol(same_seed=True), _cfg(epochs={"baseline_asc": 1}))
        assert res.std["ASC"] == 0.0

    def test_parallel_matches_serial(self):
        cfg = _cfg(epochs={"baseline_aec": 1})
        a = run_experiment(_tiny_protocol("baseline_aec"), cfg, jobs=1)
        b = run_experiment(_tiny_protocol("baseline_aec"), cfg, jobs=2)
        assert a.to_dict() == b.to_dict()

    def test_finetune_stage_records_both(self):
        res = run_experiment(_tiny_protocol("finetune_aec"), _cfg(epochs={"mtl": 1, "finetune_aec": 1}))
        assert all(r.frozen_unchanged for r in res.runs)
        assert all(set(r.accuracy) == {"finetune_aec", "mtl_ic"} for r in res.runs)

    def test_job_seeds_distinct(self):
        seeds = {job_seed(0, f, r) for f in range(4) for r in range(3)}
        assert len(seeds) == 12

    def test_summarize_consistent(self):
        runs = _tiny_runs()
        res = ExperimentResult.summarize("mtl", runs)
        assert res.mean["ASC"] == pytest.approx(np.mean([0.5, 0.75, 1.0]), abs=1e-12)

    def test_unknown_stage(self):
        with pytest.raises(ValidationError):
            _tiny_protocol("pretrain")


def _tiny_runs():
    from soundmtl.training import JobResult

    vals = {0: 0.5, 1: 0.75, 2: 1.0}
    return [JobResult(f, r, 0, {"mtl": {"ASC": vals[r]}}) for f in range(4) for r in range(3)]


def test_epoch_report_json_sorted():
    r = EpochReport(1, 0.5, None, {"ASC": 1.0}, 3.2)
    assert r.to_json() == '{"accuracy": {"ASC": 1.0}, "epoch": 1, "train_loss": 0.5, "val_loss": null}'
