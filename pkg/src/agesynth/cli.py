"""``agesynth`` command line: preprocessing, phantoms, training, synthesis, evaluation.

Exit status: 0 on success, 1 when some volumes or pairs failed (the rest are
still processed), 2 for usage errors, 3 for configuration or input errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .conditioning import ConditioningError, Health, encode_age_delta
from .config import ConfigFileError, derive_seed, load_config_file, resolve, write_resolved
from .data import (
    DatasetError,
    DatasetManifest,
    ManifestError,
    ManifestRow,
    PhantomSpec,
    PhantomSpecError,
    SliceDataset,
    Volume,
    VolumeIOError,
    generate_phantom_dataset,
    load_volume,
    preprocess_volume,
    preprocessed_header,
    save_volume,
    stack_slices,
)
from .data.volumes import DegenerateVolumeError
from .evaluation import AgePredictor, AgePredictorConfig, EvaluationPair, evaluate_pairs, train_age_predictor
from .experiment import ABLATION_GRIDS, DEFAULT_GRIDS, PhantomExperiment, run_ablation, synthesize
from .losses import AgeRange, LossInputError, LossWeights
from .networks import ConfigError, NetworkConfig, ShapeError
from .trainer import TrainConfig, TrainingDiverged, load_checkpoint, train

log = logging.getLogger("agesynth")

EXIT_PARTIAL, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3
DIFFERENCE_SCALE = {"range": [0.0, 2.0], "definition": "|synthetic - input| on the [-1, 1] intensity scale",
                    "colormap": "hot"}
INPUT_ERRORS = (ConfigError, ConfigFileError, ManifestError, DatasetError, PhantomSpecError, ConditioningError,
                LossInputError, VolumeIOError, ShapeError)


class CommandFailed(Exception):
    """Raised for configuration or input problems that stop a command."""


# ---------------------------------------------------------------- config


def train_config_from(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg.get("train") or {})
    net = dict(t.pop("network", None) or {})
    if "widths" in net:
        net["widths"] = tuple(net["widths"])
    net.setdefault("seed", derive_seed(seed, "network"))
    weights = LossWeights(**(t.pop("loss_weights", None) or {}))
    age_range = t.pop("age_range", None)
    if isinstance(age_range, (list, tuple)):
        age_range = AgeRange(*age_range)
    elif isinstance(age_range, dict):
        age_range = AgeRange(**age_range)
    t.setdefault("seed", derive_seed(seed, "train"))
    unknown = set(t) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown training options: {sorted(unknown)}")
    return TrainConfig(network=NetworkConfig(**net), loss_weights=weights, age_range=age_range, **t)


def predictor_config_from(cfg: dict, seed: int) -> AgePredictorConfig:
    p = dict(cfg.get("predictor") or {})
    p.setdefault("seed", derive_seed(seed, "predictor"))
    return AgePredictorConfig(**p)


def phantom_spec_from(cfg: dict) -> PhantomSpec:
    try:
        return PhantomSpec(**(cfg.get("phantom") or {}))
    except TypeError as exc:
        raise PhantomSpecError(str(exc)) from None


def _slices(cfg: dict, args) -> list[int] | None:
    data = cfg.setdefault("data", {})
    chosen = getattr(args, "slices", None)
    if chosen is None:
        chosen = data.get("slices")
    data["slices"] = None if chosen is None else [int(s) for s in chosen]
    return data["slices"]


def _load_cfg(args) -> dict:
    file_cfg = load_config_file(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    overrides = {"seed": seed}
    if getattr(args, "steps", None) is not None:
        overrides["train"] = {"max_steps": args.steps}
    cfg = resolve(file_cfg, getattr(args, "preset", None), overrides)
    cfg["seed"] = seed
    return cfg


# ---------------------------------------------------------------- commands


def cmd_preprocess(args, cfg: dict, out: Path) -> int:
    manifest = DatasetManifest.read(args.manifest)
    vol_dir = out / "volumes"
    rows, failures = [], 0
    for row in manifest.rows:
        if row.exclude:
            rows.append(row)
            continue
        try:
            vol = load_volume(manifest.resolve(row))
            stacked = stack_slices(preprocess_volume(vol), preprocessed_header(vol))
            dest = vol_dir / f"{row.subject_id}_{_age_tag(row.meta.age)}.nii.gz"
            save_volume(stacked, dest)
            rows.append(replace(row, path=str(dest.relative_to(out))))
        except (VolumeIOError, DegenerateVolumeError, ShapeError, ValueError) as exc:
            failures += 1
            log.error("preprocess %s failed: %s", row.subject_id, exc)
    DatasetManifest(rows, root=out).write(out / "manifest.csv")
    cfg["outputs"] = {"manifest": "manifest.csv", "processed": len(rows) - sum(r.exclude for r in rows),
                      "failed": failures}
    return EXIT_PARTIAL if failures else 0


def _age_tag(age: float) -> str:
    return f"age{age:g}".replace(".", "p")


def cmd_phantom_gen(args, cfg: dict, out: Path) -> int:
    spec = phantom_spec_from(cfg)
    ds = generate_phantom_dataset(spec, args.subjects, derive_seed(cfg["seed"], "phantom"))
    spec.dump(out / "phantom_spec.yaml")
    rows = []
    for s in ds.subjects:
        rel = f"volumes/{s.subject_id}.nii.gz"
        save_volume(ds.render_volume(s), out / rel, dtype=np.int16)
        rows.append(ManifestRow(s.meta, rel, s.split))
    DatasetManifest(rows, root=out).write(out / "manifest.csv")
    n_pairs = 0
    with open(out / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("subject_id", "baseline", "followup", "age_in", "age_out", "health_in", "health_out"))
        for s in ds.split("test"):
            for dy in args.followup_years:
                a_o = s.age + dy
                if a_o > spec.age_range[1]:
                    continue
                rel = f"followups/{s.subject_id}_{_age_tag(a_o)}.nii.gz"
                save_volume(ds.render_volume(s, a_o), out / rel, dtype=np.int16)
                w.writerow((s.subject_id, f"volumes/{s.subject_id}.nii.gz", rel, s.age, a_o, s.health.value, s.health.value))
                n_pairs += 1
    cfg["phantom"] = spec.to_dict()
    cfg["outputs"] = {"manifest": "manifest.csv", "pairs": "pairs.csv", "n_subjects": len(rows), "n_pairs": n_pairs}
    return 0


def _dataset(manifest_path, split, slices, health=None) -> SliceDataset:
    manifest = DatasetManifest.read(manifest_path)
    return SliceDataset.from_manifest(manifest, split, slices=slices, health=health)


def cmd_train(args, cfg: dict, out: Path) -> int:
    config = train_config_from(cfg, cfg["seed"])
    dataset = _dataset(args.manifest, "train", _slices(cfg, args))
    result = train(config, dataset, out_dir=out, resume=args.resume)
    cfg["train"] = result.state.config.to_dict()
    cfg["outputs"] = {"checkpoint": "final.pt", "log": "train_log.jsonl", "steps": result.state.step}
    return 0


def cmd_synthesize(args, cfg: dict, out: Path) -> int:
    state = load_checkpoint(args.checkpoint)
    G, scheme = state.G, state.config.network.scheme
    manifest = DatasetManifest.read(args.manifest)
    healths = [Health.parse(h) for h in args.target_health] if args.target_health else None
    records, failures = [], 0
    for row in manifest.active(args.split):
        try:
            vol = load_volume(manifest.resolve(row))
            slices = np.stack(preprocess_volume(vol))
            header = preprocessed_header(vol)
        except (VolumeIOError, DegenerateVolumeError, ShapeError, ValueError) as exc:
            failures += 1
            log.error("synthesize: cannot read %s: %s", row.subject_id, exc)
            continue
        for age in args.target_age:
            for h in healths or [row.meta.health]:
                try:
                    encode_age_delta(row.meta.age, age, scheme)
                except ConditioningError as exc:
                    failures += 1
                    log.error("synthesize %s: %s", row.subject_id, exc)
                    continue
                a_d = int(np.floor(age)) - int(np.floor(row.meta.age))
                fake = synthesize(G, slices, a_d, h, scheme)
                stem = f"{row.subject_id}_{_age_tag(age)}_{h.value}"
                save_volume(stack_slices(fake, header), out / "synthetic" / f"{stem}.nii.gz")
                diff = Volume(np.abs(fake - slices), header.affine, header.meta, False)
                save_volume(diff, out / "difference" / f"{stem}_diff.nii.gz")
                records.append((row.subject_id, row.meta.age, age, h.value,
                                f"synthetic/{stem}.nii.gz", f"difference/{stem}_diff.nii.gz"))
    with open(out / "synthesized.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("subject_id", "input_age", "target_age", "health", "synthetic", "difference"))
        w.writerows(records)
    (out / "difference_scale.yaml").write_text(yaml.safe_dump(DIFFERENCE_SCALE, sort_keys=False))
    cfg["outputs"] = {"table": "synthesized.csv", "n_outputs": len(records), "failed": failures,
                      "difference_scale": DIFFERENCE_SCALE}
    return EXIT_PARTIAL if failures else 0


def _read_pairs(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ManifestError(f"cannot open pairs file {path}: {exc}") from exc
    need = {"subject_id", "followup", "age_out"}
    if not rows or need - set(rows[0]):
        raise ManifestError(f"{path}: pairs file needs columns {sorted(need)} and at least one row")
    return rows


def _select(slices, chosen):
    return slices if chosen is None else slices[chosen]


def cmd_evaluate(args, cfg: dict, out: Path) -> int:
    pairs_path = Path(args.pairs)
    rows = _read_pairs(pairs_path)
    root = pairs_path.parent
    chosen = _slices(cfg, args)
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if state is None and "synthetic" not in rows[0]:
        raise ManifestError("pairs file has no 'synthetic' column; pass --checkpoint to synthesize")
    predictor = AgePredictor.load(args.predictor) if args.predictor else None
    pairs, failures = [], 0
    for r in rows:
        try:
            follow = _select(np.stack(preprocess_volume(load_volume(root / r["followup"]))), chosen)
            base = None
            if r.get("baseline"):
                base = _select(np.stack(preprocess_volume(load_volume(root / r["baseline"]))), chosen)
            if state is not None:
                if base is None:
                    raise ValueError("synthesis needs a baseline column")
                a_d = int(np.floor(float(r["age_out"]))) - int(np.floor(float(r["age_in"])))
                encode_age_delta(float(r["age_in"]), float(r["age_out"]), state.config.network.scheme)
                syn = synthesize(state.G, base, a_d, r.get("health_out") or "CN")
            else:
                syn = _select(np.stack(preprocess_volume(load_volume(root / r["synthetic"]))), chosen)
        except (VolumeIOError, DegenerateVolumeError, ShapeError, ConditioningError, ValueError, KeyError) as exc:
            failures += 1
            log.error("evaluate %s failed: %s", r.get("subject_id"), exc)
            continue
        pairs.append(EvaluationPair(r["subject_id"], syn, follow, float(r["age_out"]), baseline=base))
    if not pairs:
        raise CommandFailed("no pair could be evaluated")
    report = evaluate_pairs(predictor, pairs, {"pairs": str(pairs_path), "checkpoint": args.checkpoint,
                                               "predictor": args.predictor, "seed": cfg["seed"]})
    report.write_csv(out / "metrics.csv")
    report.write_summary(out / "summary.yaml")
    failures += len(report.failures)
    cfg["outputs"] = {"metrics": "metrics.csv", "summary": "summary.yaml", "failed": failures}
    return EXIT_PARTIAL if failures else 0


def cmd_train_age_predictor(args, cfg: dict, out: Path) -> int:
    config = predictor_config_from(cfg, cfg["seed"])
    health = Health.parse(args.health) if args.health else None
    dataset = _dataset(args.manifest, None if args.all_splits else "train", _slices(cfg, args), health)
    predictor = train_age_predictor(dataset, config)
    predictor.save(out / "predictor.pt")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("epoch", "train_mae", "val_mae"), lineterminator="\n")
        w.writeheader()
        w.writerows(predictor.history)
    cfg["predictor"] = config.to_dict()
    cfg["outputs"] = {"predictor": "predictor.pt", "val_mae": predictor.val_mae}
    return 0


def ablation_experiment(cfg: dict, subjects: int, predictor_subjects: int) -> PhantomExperiment:
    """The phantom experiment ``agesynth ablate`` runs for a resolved config."""
    base = train_config_from(cfg, cfg["seed"])
    return PhantomExperiment(
        n_subjects=subjects,
        steps=base.max_steps if base.max_steps is not None else 2000,
        seed=cfg["seed"],
        spec=phantom_spec_from(cfg),
        train=base,
        predictor=predictor_config_from(cfg, cfg["seed"]),
        predictor_subjects=predictor_subjects,
    )


def cmd_ablate(args, cfg: dict, out: Path) -> int:
    exp = ablation_experiment(cfg, args.subjects, args.predictor_subjects)
    predictor = AgePredictor.load(args.predictor) if args.predictor else None
    rows = run_ablation(exp, args.grid, out, predictor=predictor)
    cfg["train"] = exp.train_config().to_dict()
    cfg["outputs"] = {"table": "ablation.csv", "rows": len(rows), "grids": list(args.grid)}
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="YAML run configuration")
    g.add_argument("--seed", type=int, help="master seed (default: config file value or 0)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--preset", choices=("paper", "smoke"), help="base settings (default: paper)")
    g.add_argument("--verbose", "-v", action="count", default=0, help="more logging")


def _slice_arg(p):
    p.add_argument("--slices", type=int, nargs="+", metavar="K", help="axial positions (0-59) to use; default all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agesynth", description="Age-conditioned brain MRI slice synthesis.")
    parser.add_argument("--version", action="version", version=f"agesynth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("preprocess", help="normalize, slice and crop every volume of a manifest")
    p.add_argument("--manifest", required=True)
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("phantom-gen", help="write an ageing-phantom cohort as volumes plus manifest")
    p.add_argument("--subjects", type=int, default=200)
    p.add_argument("--followup-years", type=int, nargs="*", default=[10, 20, 30],
                   help="ground-truth follow-ups rendered for test subjects (evaluation only)")
    _common(p)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train the conditional generator and critic")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, help="stop after this many generator updates")
    p.add_argument("--resume", help="checkpoint to continue from")
    _slice_arg(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="age every volume of a manifest to the target ages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--target-age", type=float, nargs="+", required=True)
    p.add_argument("--target-health", nargs="+", choices=[h.value for h in Health],
                   help="default: each subject's own health state")
    p.add_argument("--split", choices=("train", "test"), help="restrict to one split")
    _common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score synthetic images against ground-truth follow-ups")
    p.add_argument("--pairs", required=True, help="CSV with subject_id, followup, age_out and baseline/synthetic")
    p.add_argument("--checkpoint", help="synthesize from the baseline column with this model")
    p.add_argument("--predictor", help="age predictor archive for PAD")
    _slice_arg(p)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-age-predictor", help="fit the VGG-style age regressor used for PAD")
    p.add_argument("--manifest", required=True)
    p.add_argument("--health", choices=[h.value for h in Health], help="train on one health state only")
    p.add_argument("--all-splits", action="store_true", help="use train and test rows")
    _slice_arg(p)
    _common(p)
    p.set_defaults(func=cmd_train_age_predictor)

    p = sub.add_parser("ablate", help="phantom ablation grids over losses, encodings and latent sizes")
    p.add_argument("--grid", nargs="+", choices=sorted(ABLATION_GRIDS), default=list(DEFAULT_GRIDS))
    p.add_argument("--steps", type=int, help="generator updates per grid row (default 2000)")
    p.add_argument("--subjects", type=int, default=200)
    p.add_argument("--predictor", help="reuse an age predictor archive instead of fitting one")
    p.add_argument("--predictor-subjects", type=int, default=400)
    _common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.use_deterministic_algorithms(True, warn_only=True)
    out = Path(args.out)
    try:
        cfg = _load_cfg(args)
        cfg["command"] = args.command
        cfg["seeds"] = {name: derive_seed(cfg["seed"], name) for name in ("network", "train", "phantom", "predictor")}
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        status = args.func(args, cfg, out)
    except (CommandFailed, TrainingDiverged, *INPUT_ERRORS) as exc:
        print(f"agesynth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as exc:
        print(f"agesynth {args.command}: error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_resolved(cfg, out)
    return status


if __name__ == "__main__":
    sys.exit(main())
