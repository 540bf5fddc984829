"""Shared drivers for the CLI and acceptance tests."""
import hashlib
import json
from pathlib import Path

from soundmtl import cli

SPEC = {"recordings_per_class": 8, "seed": 5}
CONFIG = {"epochs": {"mtl": 6, "finetune_asc": 4, "finetune_aec": 4, "baseline_asc": 4}}


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(root: Path, spec=SPEC, config=CONFIG):
    """synth -> features -> mixup -> train -> finetune -> eval -> ensemble, all with relative paths."""
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "train.json").write_text(json.dumps(config))
    steps = [
        ("synth", "--spec", "spec.json", "--out", "corpus"),
        ("features", "--manifest", "corpus/scene_manifest.json", "--out", "fs", "--channels", "triple"),
        ("features", "--manifest", "corpus/event_manifest.json", "--out", "fe", "--channels", "mono"),
        ("mixup", "--scene-features", "fs", "--event-features", "fe", "--seed", "2", "--out", "mx"),
        ("train", "--stage", "mtl-ic", "--mixup", "mx", "--config", "train.json", "--out", "mtl"),
        ("finetune", "--task", "asc", "--from", "mtl/model.smck", "--config", "train.json", "--out", "ft_asc"),
        ("finetune", "--task", "aec", "--from", "mtl/model.smck", "--config", "train.json", "--out", "ft_aec"),
        ("eval", "--checkpoint", "ft_asc/model.smck", "--features", "fs", "--scores-out", "scores/triple_r0_f0.csv"),
        ("eval", "--checkpoint", "ft_asc/model.smck", "--features", "fs", "--scores-out", "scores/triple_r1_f0.csv",
         "--classifier-id", "triple_r1_f0"),
        ("ensemble", "--scores-dir", "scores", "--labels", "fs/manifest.json", "--report", "ensemble.json"),
    ]
    for step in steps:
        assert run(*step) == 0, step


def digests(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
