"""``soundmtl`` command-line driver.

Every subcommand writes a ``config.json`` echo of its arguments and resolved
settings next to its outputs.  Exit codes: 0 success, 2 usage or
configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import (
    FoldPlan,
    MixupSample,
    SyntheticSpec,
    build_mixup_set,
    generate_synthetic_corpus,
    make_one_hot,
    samples_from_manifest,
    select,
    standardize,
)
from .ensemble import (
    ClassifierRef,
    EnsembleSpec,
    ScoreMatrix,
    fuse_and_score,
    read_score_dir,
    subsample_ensembles,
    write_scores_csv,
)
from .errors import ConfigurationError, DataError, NumericalError, SoundMTLError, UsageError, ValidationError
from .features import (
    FeatureOptions,
    dump_json,
    extract_dataset,
    fit_standardizer,
    load_json,
    read_archive,
    write_archive,
)
from .gradsuite import run_suite
from .network import build_baseline, build_mtl, load_checkpoint, rebuild_for_finetune, save_checkpoint
from .training import (
    STAGES,
    Protocol,
    TrainConfig,
    evaluate,
    evaluate_mtl,
    finetune,
    frozen_digest,
    run_experiment,
    train_mtl,
    train_single_task,
    write_reports,
)

log = logging.getLogger("soundmtl")

ARCHIVE = "features.smt"
MANIFEST = "manifest.json"
MIXUP_MANIFEST = "mixup_manifest.json"
MODEL = "model.smck"
REPORTS = "reports.jsonl"
SUMMARY = "summary.json"
ECHO = "config.json"


# -- helpers ----------------------------------------------------------------------

def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo(target: Path, args, resolved: dict) -> None:
    arguments = {k: v for k, v in vars(args).items() if k != "func"}
    dump_json({"command": args.command, "arguments": arguments, "resolved": resolved, "version": __version__},
              target)


def _read_json(path, what: str, error=DataError):
    try:
        return load_json(path)
    except FileNotFoundError:
        raise error(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise error(f"{what} {path} is not valid JSON: {exc}") from None


def _train_config(args) -> TrainConfig:
    overrides = _read_json(args.config, "config file", ConfigurationError) if args.config else {}
    if not isinstance(overrides, dict):
        raise ConfigurationError("a config file must hold a JSON object")
    try:
        base = (TrainConfig.desk_scale() if args.profile == "desk" else TrainConfig.full_scale()).to_dict()
        merged = {**base, **overrides}
        if "epochs" in overrides:
            merged["epochs"] = {**base["epochs"], **overrides["epochs"]}
        if args.seed is not None:
            merged["seed"] = args.seed
        return TrainConfig.from_dict(merged)
    except (ValidationError, TypeError) as exc:
        raise ConfigurationError(f"invalid training config: {exc}") from None


def _load_features(directory):
    d = Path(directory)
    manifest = _read_json(d / MANIFEST, "feature manifest")
    try:
        images = read_archive(d / ARCHIVE)
    except FileNotFoundError:
        raise DataError(f"feature archive not found: {d / ARCHIVE}") from None
    return samples_from_manifest(images, manifest), manifest


def _task_of(manifest) -> str:
    return manifest.get("task", "ASC").upper()


def _split(samples, manifest, fold):
    plan = FoldPlan.from_manifest(manifest)
    if not 0 <= fold < plan.n_folds:
        raise ConfigurationError(f"fold must lie in 0..{plan.n_folds - 1}, got {fold}")
    train, val = plan.split(fold)
    return select(samples, train), select(samples, val)


def _summary(results) -> dict:
    return {task: r.to_dict() for task, r in results.items()}


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args) -> None:
    spec = SyntheticSpec.from_dict(_read_json(args.spec, "synthetic spec", ConfigurationError)) if args.spec \
        else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = _out_dir(args.out)
    sm, em = generate_synthetic_corpus(spec, out)
    _echo(out / ECHO, args, {"synthetic_spec": spec.to_dict()})
    print(f"wrote {len(sm['entries'])} scene and {len(em['entries'])} event recordings to {out}")


def cmd_features(args) -> None:
    manifest = _read_json(args.manifest, "manifest")
    base = FeatureOptions.desk_scale() if args.profile == "desk" else FeatureOptions()
    options = replace(base, channels=args.channels, sample_rate=args.sample_rate)
    base_dir = Path(args.base_dir) if args.base_dir else Path(args.manifest).parent
    images, updated = extract_dataset(manifest, options, base_dir, jobs=args.jobs)
    if not images:
        raise DataError("no segments extracted: every clip is shorter than one segment")
    out = _out_dir(args.out)
    write_archive(out / ARCHIVE, images)
    dump_json(updated, out / MANIFEST)
    _echo(out / ECHO, args, {"features": options.to_dict()})
    print(f"wrote {len(images)} images from {len(manifest['entries'])} recordings to {out / ARCHIVE}")


def _mixup_entries(mixed, split, scene_names, event_names):
    return [{"id": f"{split}/{i}", "split": split, "feature_offset": i,
             "scene_source": "/".join(map(str, m.source_scene_id)),
             "event_source": "/".join(map(str, m.source_event_id)),
             "scene_label": scene_names[int(m.scene_label.argmax())],
             "event_label": event_names[int(m.event_label.argmax())]} for i, m in enumerate(mixed)]


def cmd_mixup(args) -> None:
    scenes, s_man = _load_features(args.scene_features)
    events, e_man = _load_features(args.event_features)
    if (_task_of(s_man), _task_of(e_man)) != ("ASC", "AEC"):
        raise UsageError("--scene-features must hold ASC features and --event-features AEC features")
    s_tr, s_va = _split(scenes, s_man, args.fold)
    e_tr, e_va = _split(events, e_man, args.fold)
    s_stats = fit_standardizer(s.image for s in s_tr)
    e_stats = fit_standardizer(s.image for s in e_tr)
    s_tr, s_va = standardize(s_tr, *s_stats), standardize(s_va, *s_stats)
    e_tr, e_va = standardize(e_tr, *e_stats), standardize(e_va, *e_stats)
    train = build_mixup_set(s_tr, e_tr, args.seed)
    val = build_mixup_set(s_va, e_va, args.seed + 1)
    out = _out_dir(args.out)
    write_archive(out / "mixup_train.smt", [m.image for m in train])
    write_archive(out / "mixup_val.smt", [m.image for m in val])
    scene_names = {v: k for k, v in s_man["label_map"].items()}
    event_names = {v: k for k, v in e_man["label_map"].items()}
    manifest = {
        "seed": args.seed, "fold": args.fold,
        "archives": {"train": "mixup_train.smt", "val": "mixup_val.smt"},
        "features": {"ASC": str(args.scene_features), "AEC": str(args.event_features)},
        "label_map": {"ASC": s_man["label_map"], "AEC": e_man["label_map"]},
        "standardizer": {"ASC": list(s_stats), "AEC": list(e_stats)},
        "entries": _mixup_entries(train, "train", scene_names, event_names)
        + _mixup_entries(val, "val", scene_names, event_names),
    }
    dump_json(manifest, out / MIXUP_MANIFEST)
    _echo(out / ECHO, args, {"seed": args.seed, "fold": args.fold})
    print(f"wrote {len(train)} training and {len(val)} validation mixup samples to {out}")


def _load_mixup(directory):
    d = Path(directory)
    man = _read_json(d / MIXUP_MANIFEST, "mixup manifest")
    out = {}
    for split, name in man["archives"].items():
        try:
            images = read_archive(d / name)
        except FileNotFoundError:
            raise DataError(f"mixup archive not found: {d / name}") from None
        entries = [e for e in man["entries"] if e["split"] == split]
        if len(entries) != len(images):
            raise DataError(f"{d / name}: {len(images)} records but {len(entries)} manifest entries")
        samples = []
        for e in entries:
            s_map, e_map = man["label_map"]["ASC"], man["label_map"]["AEC"]
            src_s, src_e = e["scene_source"].rsplit("/", 2), e["event_source"].rsplit("/", 2)
            samples.append(MixupSample(images[e["feature_offset"]],
                                       make_one_hot(s_map[e["scene_label"]], len(s_map)),
                                       make_one_hot(e_map[e["event_label"]], len(e_map)),
                                       (src_s[0], int(src_s[1]), src_s[2]), (src_e[0], int(src_e[1]), src_e[2])))
        out[split] = samples
    return out, man


def _finish_training(out: Path, graph, reports, summary: dict, args, cfg: TrainConfig) -> None:
    save_checkpoint(graph, out / MODEL)
    write_reports(reports, out / REPORTS)
    dump_json(summary, out / SUMMARY)
    _echo(out / ECHO, args, {"train": cfg.to_dict()})
    for task, res in summary.get("validation", {}).items():
        print(f"{task}: segment accuracy {res['segment_accuracy']:.4f}, "
              f"recording accuracy {res['recording_accuracy']:.4f}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    if args.stage == "baseline":
        if not args.features:
            raise UsageError("--stage baseline needs --features")
        samples, man = _load_features(args.features)
        task = _task_of(man)
        train, val = _split(samples, man, args.fold)
        stats = fit_standardizer(s.image for s in train)
        train, val = standardize(train, *stats), standardize(val, *stats)
        spec = cfg.task_specs(len(man["label_map"]), 1)[0] if task == "ASC" \
            else cfg.task_specs(1, len(man["label_map"]))[1]
        graph = build_baseline(spec, cfg.template, cfg.seed)
        graph.metadata.update(standardizer={task: list(stats)}, fold=args.fold,
                              features={task: str(args.features)}, label_map={task: man["label_map"]})
        _, reports = train_single_task(graph, train, cfg, val_samples=val)
        summary = {"stage": "baseline", "validation": {task: evaluate(graph, val, task).to_dict()}}
    else:
        if not args.mixup:
            raise UsageError(f"--stage {args.stage} needs --mixup")
        sets, man = _load_mixup(args.mixup)
        asc, aec = cfg.task_specs(len(man["label_map"]["ASC"]), len(man["label_map"]["AEC"]))
        graph = build_mtl(asc, aec, args.stage == "mtl-ic", cfg.template, cfg.seed)
        graph.metadata.update(standardizer=man["standardizer"], fold=man["fold"], features=man["features"],
                              label_map=man["label_map"], mixup_seed=man["seed"])
        _, reports = train_mtl(graph, sets["train"], cfg, val_samples=sets["val"])
        summary = {"stage": args.stage, "validation": _summary(evaluate_mtl(graph, sets["val"]))}
    _finish_training(_out_dir(args.out), graph, reports, summary, args, cfg)


def cmd_finetune(args) -> None:
    cfg = replace(_train_config(args), check_frozen=True)
    mtl = load_checkpoint(args.from_checkpoint)
    task = args.task.upper()
    feature_dir = args.features or mtl.metadata.get("features", {}).get(task)
    if not feature_dir:
        raise UsageError(f"no {task} feature directory recorded in the checkpoint; pass --features")
    samples, man = _load_features(feature_dir)
    if _task_of(man) != task:
        raise UsageError(f"{feature_dir} holds {_task_of(man)} features, not {task}")
    fold = mtl.metadata.get("fold", 0)
    train, val = _split(samples, man, fold)
    stats = mtl.metadata["standardizer"][task]
    train, val = standardize(train, *stats), standardize(val, *stats)
    graph = rebuild_for_finetune(mtl, task, cfg.keep_interconnect, cfg.seed)
    graph.metadata = {**mtl.metadata, "features": {**mtl.metadata.get("features", {}), task: str(feature_dir)}}
    before = frozen_digest(graph)
    _, reports = finetune(graph, train, cfg, val_samples=val)
    summary = {"stage": f"finetune_{task.lower()}", "frozen_unchanged": frozen_digest(graph) == before,
               "validation": {task: evaluate(graph, val, task).to_dict()}}
    _finish_training(_out_dir(args.out), graph, reports, summary, args, cfg)


def cmd_eval(args) -> None:
    graph = load_checkpoint(args.checkpoint)
    samples, man = _load_features(args.features)
    task = _task_of(man)
    if task not in graph.output_tasks:
        raise UsageError(f"model outputs {graph.output_tasks}, features are {task}")
    stats = graph.metadata.get("standardizer", {}).get(task)
    if stats is None:
        raise DataError(f"checkpoint has no {task} standardizer statistics")
    if args.split != "all":
        fold = graph.metadata.get("fold", 0) if args.fold is None else args.fold
        train, val = _split(samples, man, fold)
        samples = val if args.split == "val" else train
    samples = standardize(samples, *stats)
    res = evaluate(graph, samples, task)
    cid = args.classifier_id or Path(args.checkpoint).parent.name or Path(args.checkpoint).stem
    matrix = ScoreMatrix(cid, [s.key for s in samples], res.probs)
    scores_out = Path(args.scores_out)
    scores_out.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv([matrix], scores_out)
    dump_json({"classifier_id": cid, "task": task, **res.to_dict()}, scores_out.with_suffix(".summary.json"))
    _echo(scores_out.with_suffix(".config.json"), args, {"task": task, "standardizer": list(stats)})
    print(f"{cid} {task}: segment accuracy {res.segment_accuracy:.4f}, "
          f"recording accuracy {res.recording_accuracy:.4f} ({len(samples)} rows)")


def _labels(path) -> dict:
    doc = _read_json(path, "labels file")
    if isinstance(doc, dict) and "entries" in doc:
        field = "scene_label" if _task_of(doc) == "ASC" else "event_label"
        return {e["recording_id"]: doc["label_map"][e[field]] for e in doc["entries"]}
    if not isinstance(doc, dict) or not all(isinstance(v, int) for v in doc.values()):
        raise DataError(f"{path}: expected a feature manifest or a recording -> class index map")
    return doc


_GRID_ID = re.compile(r"^(?P<scheme>[a-z]+)_r(?P<repeat>\d+)_f(?P<fold>\d+)$")


def _grid_spec(ids) -> EnsembleSpec:
    refs = []
    for cid in ids:
        m = _GRID_ID.match(cid)
        if m is None:
            raise ConfigurationError(f"classifier id {cid!r} does not follow <scheme>_r<repeat>_f<fold>")
        refs.append(ClassifierRef(cid, int(m["fold"]), int(m["repeat"]), m["scheme"]))
    schemes = tuple(sorted({r.scheme for r in refs}))
    return EnsembleSpec(refs, len({r.fold for r in refs}), len({r.repeat for r in refs}), schemes)


def cmd_ensemble(args) -> None:
    matrices = read_score_dir(args.scores_dir)
    truth = _labels(args.labels)
    report = fuse_and_score(matrices, truth, pool_variants=not args.no_pool_variants)
    if args.subsample:
        ids = [m.classifier_id for m in matrices]
        spec = _grid_spec(ids) if args.scheme == "repeat-blocks" else EnsembleSpec([ClassifierRef(i) for i in ids])
        report["subsample"] = subsample_ensembles(spec, args.subsample, args.scheme, matrices, truth).to_dict()
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    dump_json(report, report_path)
    _echo(report_path.with_suffix(".config.json"), args, {"n_classifiers": len(matrices)})
    print(f"{len(matrices)} classifiers: recording accuracy {report['recording_accuracy']:.4f}")
    for row in report["confusion"]:
        print(" ".join(f"{v:4d}" for v in row))


def cmd_experiment(args) -> None:
    cfg = _train_config(args)
    scenes, s_man = _load_features(args.scene_features)
    events, e_man = _load_features(args.event_features)
    protocol = Protocol(args.stage, scenes, events, FoldPlan.from_manifest(s_man), FoldPlan.from_manifest(e_man),
                        n_repeats=args.repeats)
    result = run_experiment(protocol, cfg, jobs=args.jobs)
    out = _out_dir(args.out)
    dump_json(result.to_dict(), out / "experiment.json")
    _echo(out / ECHO, args, {"train": cfg.to_dict()})
    for task in result.mean:
        print(f"{args.stage} {task}: {100 * result.mean[task]:.2f} +/- {100 * result.std[task]:.2f} "
              f"over {len(result.runs)} runs")


def cmd_gradcheck(args) -> None:
    results, seconds = run_suite(args.template, args.seed, args.entries)
    for r in results:
        print(r.line())
    print(f"{len(results)} checks in {seconds:.1f} s")
    if args.out:
        out = _out_dir(args.out)
        dump_json({"checks": [{"name": r.name, "max_error": r.max_error, "tolerance": r.tolerance,
                               "passed": r.passed} for r in results]}, out / "gradcheck.json")
        _echo(out / ECHO, args, {})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for {failed}")


# -- parser -----------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--config", help="JSON object of training settings; unknown keys are rejected")
    p.add_argument("--profile", choices=("desk", "full"), default="desk",
                   help="defaults the config starts from (default: desk)")
    p.add_argument("--seed", type=int, help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soundmtl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    parser.add_argument("--version", action="version", version=f"soundmtl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the seeded synthetic scene and event corpora")
    p.add_argument("--spec", help="synthetic spec JSON {n_scenes, n_events, recordings_per_class, ...}")
    p.add_argument("--seed", type=int, help="overrides the synthetic spec seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract log-mel segment images into an archive")
    p.add_argument("--manifest", required=True, help="recording manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--channels", choices=("triple", "quadruple", "mono"), default="triple",
                   help="stereo variants (left, right, sum[, difference]) or a mono downmix")
    p.add_argument("--sample-rate", type=int, default=44100, help="expected sample rate; no resampling")
    p.add_argument("--profile", choices=("desk", "full"), default="desk",
                   help="desk: 32 bands x 32 frames; full: 128 x 128")
    p.add_argument("--base-dir", help="directory WAV paths are relative to (default: the manifest's)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("mixup", help="standardize one fold and build train/validation mixup sets")
    p.add_argument("--scene-features", required=True, help="ASC feature directory")
    p.add_argument("--event-features", required=True, help="AEC feature directory")
    p.add_argument("--seed", type=int, default=0, help="pairing seed (validation uses seed + 1)")
    p.add_argument("--fold", type=int, default=0, help="validation fold")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_mixup)

    p = sub.add_parser("train", help="train a baseline or a (inter-connected) multi-task model")
    p.add_argument("--stage", required=True, choices=("baseline", "mtl", "mtl-ic"))
    p.add_argument("--features", help="feature directory (baseline)")
    p.add_argument("--mixup", help="mixup directory (mtl, mtl-ic)")
    p.add_argument("--fold", type=int, default=0, help="validation fold (baseline)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="cross-task fusion fine-tuning of a trained multi-task model")
    p.add_argument("--task", required=True, choices=("asc", "aec"))
    p.add_argument("--from", dest="from_checkpoint", required=True, help="multi-task checkpoint")
    p.add_argument("--features", help="original single-task features (default: recorded in the checkpoint)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a feature set; one CSV row per (segment, variant)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature directory")
    p.add_argument("--scores-out", required=True, help="score CSV path")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--fold", type=int, help="validation fold (default: the checkpoint's)")
    p.add_argument("--classifier-id", help="id written to the CSV (default: checkpoint directory name)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="late fusion of score files")
    p.add_argument("--scores-dir", required=True, help="directory of score CSVs")
    p.add_argument("--labels", required=True, help="feature manifest or {recording_id: class index} JSON")
    p.add_argument("--report", required=True, help="output JSON report")
    p.add_argument("--no-pool-variants", action="store_true",
                   help="treat each channel variant as its own row instead of summing them")
    p.add_argument("--subsample", type=int, help="also score every k-classifier sub-ensemble")
    p.add_argument("--scheme", choices=("repeat-blocks", "any"), default="any",
                   help="repeat-blocks: per variant scheme, all folds of one repeat")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("experiment", help="fold rotation x repeats for one stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--scene-features", required=True)
    p.add_argument("--event-features", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1, help="parallel (fold, repeat) jobs")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every layer and model")
    p.add_argument("--template", choices=("toy", "full"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entries", type=int, default=12, help="probed entries per parameter tensor")
    p.add_argument("--out", help="optional directory for a JSON report")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SoundMTLError as exc:
        print(f"soundmtl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"soundmtl {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
