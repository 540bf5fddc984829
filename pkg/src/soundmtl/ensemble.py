"""Late fusion of many classifiers' softmax scores.

Scores for one segment are summed over classifiers and, by default, over the
segment's channel variants; the fused argmax is the segment prediction and a
majority vote over segments gives the recording prediction.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, ValidationError
from .training import vote

ROW_SUM_TOL = 1e-5


@dataclass
class ScoreMatrix:
    classifier_id: str
    keys: list  # (recording_id, segment_index, variant) per row
    scores: np.ndarray  # [N, P]

    def __post_init__(self):
        self.keys = [(str(r), int(s), str(v)) for r, s, v in self.keys]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.keys):
            raise DimensionError(f"{self.classifier_id}: {len(self.keys)} keys but scores of shape {self.scores.shape}")
        if len(set(self.keys)) != len(self.keys):
            raise ValidationError(f"{self.classifier_id}: duplicate (recording, segment, variant) keys")
        bad = np.flatnonzero(np.abs(self.scores.sum(axis=1) - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ValidationError(f"{self.classifier_id}: rows {bad[:10].tolist()} do not sum to 1")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]


@dataclass
class FusedTable:
    keys: list  # (recording_id, segment_index) or, unpooled, (recording_id, segment_index, variant)
    scores: np.ndarray
    n_classifiers: int

    def recording_ids(self) -> list:
        return [k[0] for k in self.keys]


@dataclass
class ClassifierRef:
    classifier_id: str
    fold: int = 0
    repeat: int = 0
    scheme: str = "triple"
    path: Optional[str] = None


@dataclass
class EnsembleSpec:
    """A pool of classifiers plus the folds x repeats x variant-scheme layout it came from."""

    classifiers: list
    n_folds: int = 4
    n_repeats: int = 3
    schemes: tuple = ("triple", "quadruple")

    def __post_init__(self):
        if not self.classifiers:
            raise ValidationError("an ensemble needs at least one classifier")
        ids = [c.classifier_id for c in self.classifiers]
        if len(set(ids)) != len(ids):
            raise ValidationError("classifier ids must be unique")

    @classmethod
    def grid(cls, n_folds: int = 4, n_repeats: int = 3, schemes=("triple", "quadruple")) -> "EnsembleSpec":
        refs = [ClassifierRef(f"{s}_r{r}_f{f}", f, r, s) for s in schemes for r in range(n_repeats)
                for f in range(n_folds)]
        return cls(refs, n_folds, n_repeats, tuple(schemes))

    @property
    def ids(self) -> list:
        return [c.classifier_id for c in self.classifiers]


def accumulate(matrices: Sequence[ScoreMatrix], pool_variants: bool = True) -> FusedTable:
    """Sum scores over classifiers (and over channel variants when pooling).

    Summation runs classifier by classifier in the given order, rows in file
    order, so results are reproducible bit for bit.
    """
    matrices = list(matrices)
    if not matrices:
        raise ValidationError("nothing to accumulate")
    widths = {m.num_classes for m in matrices}
    if len(widths) > 1:
        raise DimensionError(f"classifiers disagree on the class count: {sorted(widths)}")
    key_of = (lambda k: k[:2]) if pool_variants else (lambda k: k)
    key_sets = [{key_of(k) for k in m.keys} for m in matrices]
    reference = key_sets[0]
    problems = []
    for m, ks in zip(matrices, key_sets):
        missing, extra = sorted(reference - ks), sorted(ks - reference)
        if missing or extra:
            problems.append(f"{m.classifier_id}: missing {missing[:10]} unexpected {extra[:10]}")
    if problems:
        raise DataError("key sets differ across classifiers; " + "; ".join(problems))
    keys = sorted(reference)
    index = {k: i for i, k in enumerate(keys)}
    fused = np.zeros((len(keys), widths.pop()), dtype=np.float64)
    for m in matrices:
        for k, row in zip(m.keys, m.scores):
            fused[index[key_of(k)]] += row
    return FusedTable(keys, fused, len(matrices))


def predict_segments(table: FusedTable) -> np.ndarray:
    """Argmax of each fused row; ties go to the smallest class index."""
    return np.argmax(table.scores, axis=1)


def predict_recordings(recording_ids: Sequence[str], segment_predictions: Sequence[int]) -> dict:
    """Majority vote per recording (ties to the smallest class index)."""
    by_rec: dict[str, list[int]] = {}
    for rid, p in zip(recording_ids, segment_predictions):
        by_rec.setdefault(rid, []).append(int(p))
    return {rid: vote(v) for rid, v in sorted(by_rec.items())}


def recording_accuracy(predictions: dict, truth: dict) -> float:
    missing = sorted(set(predictions) - set(truth))
    if missing:
        raise DataError(f"no ground truth for recordings {missing[:10]}")
    return float(np.mean([predictions[r] == truth[r] for r in predictions]))


def fuse_and_score(matrices: Sequence[ScoreMatrix], truth: dict, pool_variants: bool = True) -> dict:
    """Fused predictions plus per-recording accuracy and confusion (rows: truth)."""
    table = accumulate(matrices, pool_variants)
    seg = predict_segments(table)
    rec = predict_recordings(table.recording_ids(), seg)
    p = table.scores.shape[1]
    confusion = np.zeros((p, p), dtype=np.int64)
    for rid, c in rec.items():
        confusion[truth[rid], c] += 1
    seg_truth = np.array([truth[r] for r in table.recording_ids()])
    return {"n_classifiers": table.n_classifiers, "classifier_ids": [m.classifier_id for m in matrices],
            "pool_variants": pool_variants,
            "segment_accuracy": float(np.mean(seg == seg_truth)),
            "recording_accuracy": recording_accuracy(rec, truth),
            "confusion": confusion.tolist(), "recording_predictions": rec}


@dataclass
class SubsampleResult:
    combinations: list  # tuples of classifier ids
    accuracies: list = field(default_factory=list)
    mean_accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        return {"combinations": [list(c) for c in self.combinations], "accuracies": self.accuracies,
                "mean_accuracy": self.mean_accuracy}


def subsample_ensembles(spec: EnsembleSpec, k: int = 8, scheme: str = "repeat-blocks",
                        matrices: Optional[Sequence[ScoreMatrix]] = None,
                        truth: Optional[dict] = None) -> SubsampleResult:
    """Enumerate k-classifier sub-ensembles and, given scores, their accuracies.

    ``"repeat-blocks"`` picks, for every variant scheme, all folds of one
    repeat; with 2 schemes x 4 folds that is 8 classifiers and
    ``n_repeats ** n_schemes`` combinations.  ``"any"`` enumerates every
    k-subset of the pool.
    """
    if scheme == "repeat-blocks":
        block = spec.n_folds * len(spec.schemes)
        if k != block:
            raise ValidationError(f"repeat-blocks combinations have {block} classifiers, not {k}")
        blocks = {}
        for c in spec.classifiers:
            blocks.setdefault((c.scheme, c.repeat), []).append(c.classifier_id)
        for key, ids in blocks.items():
            if len(ids) != spec.n_folds:
                raise ValidationError(f"block {key} has {len(ids)} classifiers, expected {spec.n_folds}")
        per_scheme = [[tuple(sorted(blocks[(s, r)])) for r in range(spec.n_repeats)] for s in spec.schemes]
        combos = [tuple(itertools.chain.from_iterable(p)) for p in itertools.product(*per_scheme)]
    elif scheme == "any":
        if not 1 <= k <= len(spec.classifiers):
            raise ValidationError(f"k must lie in 1..{len(spec.classifiers)}, got {k}")
        combos = list(itertools.combinations(spec.ids, k))
    else:
        raise ValidationError(f"unknown subsampling scheme {scheme!r}")
    result = SubsampleResult(combos)
    if matrices is not None:
        if truth is None:
            raise ValidationError("accuracies need ground-truth labels")
        by_id = {m.classifier_id: m for m in matrices}
        absent = sorted({c for combo in combos for c in combo} - set(by_id))
        if absent:
            raise DataError(f"no scores for classifiers {absent[:10]}")
        result.accuracies = [fuse_and_score([by_id[c] for c in combo], truth)["recording_accuracy"]
                             for combo in combos]
        result.mean_accuracy = float(np.mean(result.accuracies))
    return result


# -- score files ------------------------------------------------------------------

def _header(p: int) -> list:
    return ["classifier_id", "recording_id", "segment_index", "variant"] + [f"score_{i}" for i in range(p)]


def write_scores_csv(matrices: Sequence[ScoreMatrix], path) -> None:
    """UTF-8 CSV, one row per (classifier, segment, variant); floats in shortest round-trip form."""
    matrices = list(matrices)
    widths = {m.num_classes for m in matrices}
    if len(widths) != 1:
        raise DimensionError(f"one score file needs a single class count, got {sorted(widths)}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(widths.pop()))
        for m in matrices:
            for (rid, seg, var), row in zip(m.keys, m.scores):
                w.writerow([m.classifier_id, rid, seg, var] + [repr(float(x)) for x in row])


def read_scores_csv(path) -> list[ScoreMatrix]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[:4] != _header(0):
        raise DataError(f"{path}: not a score file (header {header})")
    p = len(header) - 4
    if header != _header(p):
        raise DataError(f"{path}: malformed score columns {header[4:]}")
    rows: dict[str, tuple[list, list]] = {}
    for n, rec in enumerate(reader, start=2):
        if len(rec) != p + 4:
            raise DataError(f"{path}:{n}: expected {p + 4} fields, got {len(rec)}")
        keys, scores = rows.setdefault(rec[0], ([], []))
        try:
            keys.append((rec[1], int(rec[2]), rec[3]))
            scores.append([float(x) for x in rec[4:]])
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from None
    return [ScoreMatrix(cid, keys, np.array(scores, dtype=np.float64).reshape(len(keys), p))
            for cid, (keys, scores) in rows.items()]


def read_score_dir(directory) -> list[ScoreMatrix]:
    """All ``*.csv`` score files in a directory, in file-name order."""
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise DataError(f"no score files in {directory}")
    out = []
    for f in files:
        out.extend(read_scores_csv(f))
    ids = [m.classifier_id for m in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"classifier ids repeat across files in {directory}")
    return out
