"""Labeled sample collections, fold rotation, mixup multi-label construction
and a seeded synthetic corpus for desk-scale experiments."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, ValidationError
from .features import AudioClip, SpectrogramImage, apply_standardizer, dump_json, write_wav

MIX_WEIGHT = 0.5


def make_one_hot(index: int, num_classes: int) -> np.ndarray:
    if not 0 <= index < num_classes:
        raise ValidationError(f"class index {index} out of range for {num_classes} classes")
    v = np.zeros(num_classes, dtype=np.float32)
    v[index] = 1.0
    return v


def _check_one_hot(label: Optional[np.ndarray], what: str) -> None:
    if label is None:
        return
    if label.ndim != 1 or not np.all((label == 0) | (label == 1)) or label.sum() != 1:
        raise ValidationError(f"{what} must be a one-hot vector, got {label}")


@dataclass
class LabeledSample:
    image: SpectrogramImage
    scene_label: Optional[np.ndarray] = None
    event_label: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.scene_label is None and self.event_label is None:
            raise ValidationError(f"sample {self.image.key} carries no label")
        _check_one_hot(self.scene_label, "scene_label")
        _check_one_hot(self.event_label, "event_label")

    @property
    def recording_id(self) -> str:
        return self.image.recording_id

    @property
    def segment_index(self) -> int:
        return self.image.segment_index

    @property
    def key(self) -> tuple[str, int, str]:
        return self.image.key


@dataclass
class MixupSample:
    image: SpectrogramImage
    scene_label: np.ndarray
    event_label: np.ndarray
    source_scene_id: tuple
    source_event_id: tuple

    def __post_init__(self):
        _check_one_hot(self.scene_label, "scene_label")
        _check_one_hot(self.event_label, "event_label")

    @property
    def recording_id(self) -> str:
        return self.image.recording_id

    @property
    def key(self):
        return self.image.key


@dataclass
class FoldPlan:
    assignment: dict  # recording_id -> fold index
    n_folds: int = 4
    current_val_fold: int = 0

    def __post_init__(self):
        bad = {r: f for r, f in self.assignment.items() if not 0 <= f < self.n_folds}
        if bad:
            raise ValidationError(f"fold indices outside 0..{self.n_folds - 1}: {bad}")

    @classmethod
    def from_manifest(cls, manifest: dict, n_folds: int = 4) -> "FoldPlan":
        assignment = {}
        for e in manifest["entries"]:
            rid, fold = e["recording_id"], int(e["fold"])
            if assignment.setdefault(rid, fold) != fold:
                raise ValidationError(f"recording {rid} has segments in several folds")
        return cls(assignment, n_folds)

    def split(self, val_fold: Optional[int] = None) -> tuple[set, set]:
        v = self.current_val_fold if val_fold is None else val_fold
        train = {r for r, f in self.assignment.items() if f != v}
        val = {r for r, f in self.assignment.items() if f == v}
        return train, val


def rotate_folds(plan: FoldPlan) -> list[tuple[set, set]]:
    """One (train recordings, validation recordings) pair per fold."""
    return [plan.split(v) for v in range(plan.n_folds)]


def select(samples: Sequence, recordings: set) -> list:
    return [s for s in samples if s.recording_id in recordings]


def standardize(samples: Sequence[LabeledSample], mean: float, std: float) -> list[LabeledSample]:
    return [replace(s, image=replace(s.image, values=apply_standardizer(s.image.values, mean, std)))
            for s in samples]


def build_mixup_set(scene_split: Sequence[LabeledSample], event_split: Sequence[LabeledSample],
                    seed: int) -> list[MixupSample]:
    """Pair every scene sample with a uniformly drawn event sample (with replacement).

    The mixture image is the equal-weight average of the two sources; the
    scene one-hot and event one-hot are copied through unmixed.
    """
    if not event_split:
        raise DataError("event split is empty; nothing to mix with")
    shapes = {s.image.values.shape for s in scene_split} | {e.image.values.shape for e in event_split}
    if len(shapes) > 1:
        raise DimensionError(f"scene and event images must share one bands x frames shape; found {sorted(shapes)}")
    rng = np.random.default_rng(seed)
    partners = rng.integers(0, len(event_split), size=len(scene_split))
    w = np.float32(MIX_WEIGHT)
    out = []
    for s, j in zip(scene_split, partners):
        e = event_split[j]
        if s.scene_label is None or e.event_label is None:
            raise ValidationError(f"mixup needs a scene-labelled and an event-labelled sample ({s.key}, {e.key})")
        values = w * s.image.values.astype(np.float32) + w * e.image.values.astype(np.float32)
        out.append(MixupSample(replace(s.image, values=values), s.scene_label, e.event_label, s.key, e.key))
    return out


@dataclass
class SampleArrays:
    """Stacked view of a sample list for mini-batch training."""

    images: np.ndarray  # [N, bands, frames] float32
    scene: Optional[np.ndarray]  # [N, P_S] or None
    event: Optional[np.ndarray]
    recording_ids: list
    segment_indices: list
    variants: list

    def __len__(self) -> int:
        return self.images.shape[0]

    def labels(self, task: str) -> Optional[np.ndarray]:
        return self.scene if task.upper() == "ASC" else self.event

    def take(self, idx) -> "SampleArrays":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return SampleArrays(self.images[idx], pick(self.scene), pick(self.event),
                            [self.recording_ids[i] for i in idx], [self.segment_indices[i] for i in idx],
                            [self.variants[i] for i in idx])


def to_arrays(samples) -> SampleArrays:
    if isinstance(samples, SampleArrays):
        return samples
    samples = list(samples)
    if not samples:
        raise DataError("empty sample list")

    def stack(attr):
        labels = [getattr(s, attr) for s in samples]
        if any(l is None for l in labels):
            return None
        return np.stack(labels).astype(np.float32)

    return SampleArrays(np.stack([s.image.values for s in samples]).astype(np.float32),
                        stack("scene_label"), stack("event_label"),
                        [s.image.recording_id for s in samples], [s.image.segment_index for s in samples],
                        [s.image.variant for s in samples])


def samples_from_manifest(images: Sequence[SpectrogramImage], manifest: dict) -> list[LabeledSample]:
    """Attach one-hot labels to archive images using an extracted manifest."""
    label_map = manifest["label_map"]
    task = manifest.get("task", "ASC").upper()
    field_name = "scene_label" if task == "ASC" else "event_label"
    out = []
    for e in manifest["entries"]:
        im = images[e["feature_offset"]]
        if (im.recording_id, im.segment_index, im.variant) != (e["recording_id"], e["segment_index"], e["variant"]):
            raise DataError(f"manifest entry {e['id']} does not match archive record {im.key}")
        label = make_one_hot(label_map[e[field_name]], len(label_map))
        out.append(LabeledSample(im, **{field_name: label}))
    return out


# -- synthetic corpus ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_scenes: int = 3
    n_events: int = 4
    recordings_per_class: int = 40
    clip_seconds: float = 1.5
    snr_db: float = 10.0
    seed: int = 0
    sample_rate: int = 44100
    n_folds: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _shaped_noise(rng, n, sample_rate, center_hz, octaves):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    logf = np.log2(np.maximum(f, 20.0) / center_hz)
    out = np.fft.irfft(spec * np.exp(-0.5 * (logf / octaves) ** 2), n)
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def _scene_clip(rng, spec: SyntheticSpec, cls: int) -> np.ndarray:
    n = int(round(spec.clip_seconds * spec.sample_rate))
    centers = np.geomspace(250.0, 8000.0, spec.n_scenes) if spec.n_scenes > 1 else np.array([1000.0])
    noise_gain = 10 ** (-spec.snr_db / 20)
    chans = []
    for _ in range(2):
        center = centers[cls] * 2 ** rng.uniform(-0.15, 0.15)
        x = _shaped_noise(rng, n, spec.sample_rate, center, 0.8) + noise_gain * rng.standard_normal(n)
        chans.append(x * 10 ** (rng.uniform(-3, 3) / 20))
    x = np.stack(chans)
    return 0.25 * x / np.max(np.abs(x))


def _event_clip(rng, spec: SyntheticSpec, cls: int) -> np.ndarray:
    n = int(round(spec.clip_seconds * spec.sample_rate))
    sr = spec.sample_rate
    freqs = np.geomspace(400.0, 6000.0, spec.n_events) if spec.n_events > 1 else np.array([1000.0])
    t = np.arange(n) / sr
    burst, period = int(0.08 * sr), int(0.2 * sr)
    env = np.zeros(n)
    start = int(rng.integers(0, period))
    win = np.hanning(burst)
    while start < n:
        stop = min(n, start + burst)
        env[start:stop] = win[:stop - start]
        start += period + int(rng.integers(-period // 5, period // 5))
    f0 = freqs[cls] * 2 ** rng.uniform(-0.05, 0.05)
    tone = env * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    tone /= np.sqrt(np.mean(tone ** 2)) + 1e-12
    x = tone + 10 ** (-spec.snr_db / 20) * rng.standard_normal(n)
    return (0.25 * x / np.max(np.abs(x)))[None, :]


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir=None) -> tuple[dict, dict]:
    """Seeded scene-task and event-task corpora.

    Scene classes are stationary stereo noise with class-specific spectral
    emphasis; event classes are trains of short tone bursts at
    class-specific frequencies over a noise floor (mono).  Folds are
    assigned round-robin within each class.  When ``out_dir`` is given the
    WAV files, both manifests and both label maps are written there.

    Returns ``(scene_manifest, event_manifest)``; entries reference WAV paths
    relative to ``out_dir``.
    """
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    root = np.random.SeedSequence(spec.seed)
    scene_seq, event_seq = root.spawn(2)
    manifests = []
    for task, n_classes, seq, prefix, make, field_name in (
            ("ASC", spec.n_scenes, scene_seq, "scene", _scene_clip, "scene_label"),
            ("AEC", spec.n_events, event_seq, "event", _event_clip, "event_label")):
        label_map = {f"{prefix}_{c:02d}": c for c in range(n_classes)}
        entries = []
        rngs = [np.random.default_rng(s) for s in seq.spawn(n_classes)]
        for c in range(n_classes):
            for i in range(spec.recordings_per_class):
                rid = f"{prefix}_c{c:02d}_r{i:03d}"
                wav = f"{prefix}/{rid}.wav"
                audio = make(rngs[c], spec, c)
                if out_dir is not None:
                    path = Path(out_dir) / wav
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_wav(path, AudioClip(spec.sample_rate, audio))
                entries.append({"id": rid, "wav_path": wav, "recording_id": rid, "fold": i % spec.n_folds,
                                field_name: f"{prefix}_{c:02d}"})
        manifests.append({"task": task, "label_map": label_map, "synthetic_spec": spec.to_dict(),
                          "entries": entries})
    if out_dir is not None:
        out = Path(out_dir)
        dump_json(manifests[0], out / "scene_manifest.json")
        dump_json(manifests[1], out / "event_manifest.json")
        dump_json(manifests[0]["label_map"], out / "scene_labels.json")
        dump_json(manifests[1]["label_map"], out / "event_labels.json")
    return manifests[0], manifests[1]


def synthesize_recording(spec: SyntheticSpec, task: str, cls: int, seed: int) -> AudioClip:
    """One synthetic recording outside the corpus RNG streams (for demos)."""
    rng = np.random.default_rng(seed)
    make = _scene_clip if task.upper() == "ASC" else _event_clip
    return AudioClip(spec.sample_rate, make(rng, spec, cls))
