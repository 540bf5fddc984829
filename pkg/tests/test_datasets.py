import filecmp
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from soundmtl.datasets import (
    FoldPlan,
    LabeledSample,
    SyntheticSpec,
    build_mixup_set,
    generate_synthetic_corpus,
    make_one_hot,
    rotate_folds,
    samples_from_manifest,
    select,
    to_arrays,
)
from soundmtl.errors import DataError, DimensionError, ValidationError
from soundmtl.features import SpectrogramImage, archive_bytes, extract_dataset, FeatureOptions


def _sample(values, rid, seg=0, scene=None, event=None, variant="left"):
    img = SpectrogramImage(np.asarray(values, dtype=np.float32), variant, rid, seg)
    return LabeledSample(img, scene, event)


def _scene_split(n, n_cls=3, shape=(4, 6), seed=0):
    rng = np.random.default_rng(seed)
    return [_sample(rng.normal(size=shape), f"s{i}", scene=make_one_hot(i % n_cls, n_cls)) for i in range(n)]


def _event_split(n, n_cls=4, shape=(4, 6), seed=1):
    rng = np.random.default_rng(seed)
    return [_sample(rng.normal(size=shape), f"e{i}", event=make_one_hot(i % n_cls, n_cls)) for i in range(n)]


class TestOneHot:
    def test_examples(self):
        assert make_one_hot(2, 5).tolist() == [0, 0, 1, 0, 0]
        assert make_one_hot(0, 1).tolist() == [1]

    @pytest.mark.parametrize("index", [5, 7, -1])
    def test_out_of_range(self, index):
        with pytest.raises(ValidationError):
            make_one_hot(index, 5)

    def test_sample_needs_a_label(self):
        with pytest.raises(ValidationError):
            _sample(np.zeros((2, 2)), "r")

    def test_sample_rejects_soft_label(self):
        with pytest.raises(ValidationError):
            _sample(np.zeros((2, 2)), "r", scene=np.array([0.5, 0.5], dtype=np.float32))


class TestMixup:
    def test_two_by_one_example(self):
        s = [_sample([[0, 2]], "s", scene=make_one_hot(0, 2))]
        e = [_sample([[4, 0]], "e", event=make_one_hot(1, 2))]
        (m,) = build_mixup_set(s, e, seed=0)
        assert m.image.values.tolist() == [[2, 1]]

    def test_labels_copied_verbatim(self):
        s = [_sample(np.zeros((2, 2)), "s", scene=make_one_hot(3, 15))]
        e = [_sample(np.ones((2, 2)), "e", event=make_one_hot(7, 50))]
        (m,) = build_mixup_set(s, e, seed=3)
        np.testing.assert_array_equal(m.scene_label, make_one_hot(3, 15))
        np.testing.assert_array_equal(m.event_label, make_one_hot(7, 50))

    def test_one_output_per_scene_sample(self):
        assert len(build_mixup_set(_scene_split(37), _event_split(5), 0)) == 37

    def test_same_seed_same_pairing(self):
        s, e = _scene_split(120), _event_split(50)
        a = [m.source_event_id for m in build_mixup_set(s, e, 11)]
        b = [m.source_event_id for m in build_mixup_set(s, e, 11)]
        c = [m.source_event_id for m in build_mixup_set(s, e, 12)]
        assert a == b
        assert a != c

    def test_empty_event_split(self):
        with pytest.raises(DataError):
            build_mixup_set(_scene_split(3), [], 0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            build_mixup_set(_scene_split(3, shape=(4, 6)), _event_split(3, shape=(4, 5)), 0)

    def test_wrong_label_kind(self):
        with pytest.raises(ValidationError):
            build_mixup_set(_scene_split(3), _scene_split(3), 0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n_s=st.integers(1, 30), n_e=st.integers(1, 30))
    def test_reconstruction(self, seed, n_s, n_e):
        s, e = _scene_split(n_s, seed=seed % 1000), _event_split(n_e, seed=seed % 997 + 1)
        by_key = {x.key: x for x in s + e}
        for m in build_mixup_set(s, e, seed):
            rebuilt = 2 * m.image.values - by_key[m.source_scene_id].image.values
            np.testing.assert_allclose(rebuilt, by_key[m.source_event_id].image.values, atol=1e-6, rtol=0)
            np.testing.assert_array_equal(m.event_label, by_key[m.source_event_id].event_label)

    def test_scene_marginal_exact(self):
        s = _scene_split(200)
        mixed = build_mixup_set(s, _event_split(10), 4)
        assert [m.scene_label.argmax() for m in mixed] == [x.scene_label.argmax() for x in s]

    def test_event_marginal_chi_square(self):
        # event split with unequal class frequencies: 1:2:3:4
        e = [_sample(np.zeros((2, 2)), f"e{c}_{i}", event=make_one_hot(c, 4)) for c in range(4) for i in range(c + 1)]
        s = [_sample(np.zeros((2, 2)), f"s{i}", scene=make_one_hot(0, 2)) for i in range(4000)]
        counts = np.bincount([m.event_label.argmax() for m in build_mixup_set(s, e, 5)], minlength=4)
        expected = len(s) * np.arange(1, 5) / 10
        assert chisquare(counts, expected).pvalue > 1e-3

    def test_train_val_sources_disjoint(self, desk_data):
        s_tr, s_va = desk_data.scene_plan.split(1)
        e_tr, e_va = desk_data.event_plan.split(1)
        train = build_mixup_set(select(desk_data.scene_samples, s_tr), select(desk_data.event_samples, e_tr), 0)
        val = build_mixup_set(select(desk_data.scene_samples, s_va), select(desk_data.event_samples, e_va), 1)
        for attr in ("source_scene_id", "source_event_id"):
            assert not {getattr(m, attr) for m in train} & {getattr(m, attr) for m in val}


class TestFolds:
    def _plan(self):
        return FoldPlan({f"r{i}": i // 2 for i in range(8)})

    def test_eight_recordings(self):
        splits = rotate_folds(self._plan())
        assert len(splits) == 4
        for train, val in splits:
            assert (len(train), len(val)) == (6, 2)
            assert not train & val
        assert set().union(*(v for _, v in splits)) == {f"r{i}" for i in range(8)}

    def test_each_fold_validation_once(self):
        plan = FoldPlan({f"r{i}": i % 4 for i in range(40)})
        seen = [r for _, val in rotate_folds(plan) for r in val]
        assert sorted(seen) == sorted(plan.assignment)

    def test_no_segment_leak(self):
        plan = self._plan()
        samples = [_sample(np.zeros((2, 2)), f"r{i}", seg=k, scene=make_one_hot(0, 1)) for i in range(8) for k in range(3)]
        for train, val in rotate_folds(plan):
            tr_keys = {s.key for s in select(samples, train)}
            va_keys = {s.key for s in select(samples, val)}
            assert not tr_keys & va_keys
            assert len(tr_keys) + len(va_keys) == len(samples)

    def test_bad_fold_index(self):
        with pytest.raises(ValidationError):
            FoldPlan({"a": 4})

    def test_manifest_recording_in_two_folds(self):
        man = {"entries": [{"recording_id": "a", "fold": 0}, {"recording_id": "a", "fold": 1}]}
        with pytest.raises(ValidationError):
            FoldPlan.from_manifest(man)


class TestSampleArrays:
    def test_stack_and_take(self):
        s = _scene_split(5)
        arr = to_arrays(s)
        assert arr.images.shape == (5, 4, 6) and arr.event is None
        sub = arr.take([4, 0])
        assert sub.recording_ids == ["s4", "s0"]
        np.testing.assert_array_equal(sub.scene, arr.scene[[4, 0]])

    def test_empty(self):
        with pytest.raises(DataError):
            to_arrays([])

    def test_manifest_mismatch(self, desk_data):
        man = dict(desk_data.event_manifest)
        man["entries"] = [dict(man["entries"][0], feature_offset=1)]
        with pytest.raises(DataError):
            samples_from_manifest([s.image for s in desk_data.event_samples], man)


class TestSynthetic:
    def test_counts(self, desk_data):
        sm, em = desk_data.scene_manifest, desk_data.event_manifest
        assert len({e["recording_id"] for e in sm["entries"]}) == 3 * 40
        assert len({e["recording_id"] for e in em["entries"]}) == 4 * 40
        assert sorted(sm["label_map"].values()) == [0, 1, 2]
        assert sorted(em["label_map"].values()) == [0, 1, 2, 3]
        for man, n_cls in ((sm, 3), (em, 4)):
            per_fold = np.bincount(list(FoldPlan.from_manifest(man).assignment.values()))
            assert per_fold.tolist() == [n_cls * 10] * 4

    def test_label_files(self, desk_data):
        root = Path(desk_data.root)
        for name in ("scene_manifest.json", "event_manifest.json", "scene_labels.json", "event_labels.json"):
            assert (root / name).is_file()

    def test_unknown_spec_key(self):
        with pytest.raises(ValidationError):
            SyntheticSpec.from_dict({"n_scenes": 3, "colour": "blue"})

    def test_byte_identical(self, tmp_path):
        spec = SyntheticSpec(recordings_per_class=2, clip_seconds=1.0, seed=9)
        a, b = tmp_path / "a", tmp_path / "b"
        ma = generate_synthetic_corpus(spec, a)
        mb = generate_synthetic_corpus(spec, b)
        assert ma == mb
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files
        _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
        assert not mismatch and not errors
        opts = FeatureOptions.desk_scale("triple")
        assert archive_bytes(extract_dataset(ma[0], opts, a)[0]) == archive_bytes(extract_dataset(mb[0], opts, b)[0])

    def test_seed_changes_audio(self, tmp_path):
        a = SyntheticSpec(recordings_per_class=1, clip_seconds=0.5, seed=1)
        b = SyntheticSpec(recordings_per_class=1, clip_seconds=0.5, seed=2)
        generate_synthetic_corpus(a, tmp_path / "a")
        generate_synthetic_corpus(b, tmp_path / "b")
        wav = "scene/scene_c00_r000.wav"
        assert (tmp_path / "a" / wav).read_bytes() != (tmp_path / "b" / wav).read_bytes()

    @staticmethod
    def _centroid_accuracy(samples, plan, task):
        accs = []
        for train, val in rotate_folds(plan):
            a, b = to_arrays(select(samples, train)), to_arrays(select(samples, val))
            ya, yb = a.labels(task).argmax(1), b.labels(task).argmax(1)
            cents = np.stack([a.images[ya == c].mean(0) for c in range(a.labels(task).shape[1])])
            dist = ((b.images[:, None] - cents[None]) ** 2).sum(axis=(2, 3))
            accs.append(np.mean(dist.argmin(1) == yb))
        return float(np.mean(accs))

    def test_scene_task_learnable(self, desk_data):
        assert self._centroid_accuracy(desk_data.scene_samples, desk_data.scene_plan, "ASC") > 0.8
