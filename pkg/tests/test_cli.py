import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest
import yaml

from agesynth.cli import EXIT_CONFIG, EXIT_PARTIAL, main
from agesynth.data import DatasetManifest, load_volume

TINY = {
    "train": {
        "batch_size": 2, "warmup_epochs": 1, "warmup_critic_iters": 2, "critic_iters": 1,
        "steps_per_epoch": 2, "learning_rate": 1e-3, "network": {"widths": [2, 2, 2, 4]},
    },
    "predictor": {"epochs": 2, "channels": [2, 4], "dense": 8},
}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree(root: Path, pattern="**/*.nii.gz") -> dict[str, str]:
    return {str(p.relative_to(root)): _digest(p) for p in sorted(root.glob(pattern))}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert main(["phantom-gen", "--subjects", "6", "--followup-years", "10", "--seed", "3", "--out", str(root / "ph")]) == 0
    assert main(["preprocess", "--manifest", str(root / "ph" / "manifest.csv"), "--out", str(root / "pre")]) == 0
    return root


def test_phantom_gen_outputs(work):
    ph = work / "ph"
    m = DatasetManifest.read(ph / "manifest.csv")
    assert len(m) == 6
    vol = load_volume(m.resolve(m.rows[0]))
    assert vol.voxels.shape == (64, 218, 182) and not vol.normalized
    pairs = list(csv.DictReader(open(ph / "pairs.csv")))
    assert pairs and all(float(p["age_out"]) - float(p["age_in"]) == 10 for p in pairs)
    cfg = yaml.safe_load((ph / "resolved_config.yaml").read_text())
    assert cfg["command"] == "phantom-gen" and cfg["seed"] == 3 and "phantom" in cfg


def test_preprocess_writes_60_slices_and_is_idempotent(work):
    m = DatasetManifest.read(work / "pre" / "manifest.csv")
    for row in m.active():
        v = load_volume(m.resolve(row))
        assert v.voxels.shape == (60, 208, 160) and v.normalized
    assert main(["preprocess", "--manifest", str(work / "pre" / "manifest.csv"), "--out", str(work / "pre2")]) == 0
    assert _tree(work / "pre") == _tree(work / "pre2")


def test_preprocess_missing_file_partial(work, tmp_path):
    src = (work / "pre" / "manifest.csv").read_text().splitlines()
    bad = src[:3] + ["ghost,nowhere.nii.gz,50,CN,train,0"]
    (work / "pre" / "broken.csv").write_text("\n".join(bad) + "\n")
    assert main(["preprocess", "--manifest", str(work / "pre" / "broken.csv"), "--out", str(tmp_path)]) == EXIT_PARTIAL
    done = DatasetManifest.read(tmp_path / "manifest.csv")
    assert [r.subject_id for r in done] == [line.split(",")[0] for line in src[1:3]]


def _train(work, out, seed=0):
    return main(["train", "--manifest", str(work / "pre" / "manifest.csv"), "--config", str(work / "tiny.yaml"),
                 "--steps", "3", "--slices", "30", "--seed", str(seed), "--out", str(out)])


def test_train_determinism_and_resolved_config(work):
    assert _train(work, work / "runA") == 0
    assert _train(work, work / "runB") == 0
    a = (work / "runA" / "train_log.jsonl").read_text()
    assert a == (work / "runB" / "train_log.jsonl").read_text()
    cfg = yaml.safe_load((work / "runA" / "resolved_config.yaml").read_text())
    assert cfg["train"]["max_steps"] == 3 and cfg["train"]["network"]["widths"] == [2, 2, 2, 4]
    assert cfg["data"]["slices"] == [30]
    assert _train(work, work / "runC", seed=1) == 0
    assert (work / "runC" / "train_log.jsonl").read_text() != a


def test_synthesize_outputs_and_determinism(work):
    ckpt = work / "runA" / "final.pt"
    args = ["synthesize", "--checkpoint", str(ckpt), "--manifest", str(work / "pre" / "manifest.csv"),
            "--target-age", "85", "90", "--target-health", "CN", "AD", "--split", "test"]
    assert main(args + ["--out", str(work / "synA")]) == 0
    assert main(args + ["--out", str(work / "synB")]) == 0
    assert _tree(work / "synA") == _tree(work / "synB") and _tree(work / "synA")
    rows = list(csv.DictReader(open(work / "synA" / "synthesized.csv")))
    assert len(rows) == 4 * len(DatasetManifest.read(work / "pre" / "manifest.csv").active("test"))
    syn = load_volume(work / "synA" / rows[0]["synthetic"]).voxels
    diff = load_volume(work / "synA" / rows[0]["difference"]).voxels
    assert syn.shape == diff.shape == (60, 208, 160)
    assert diff.min() >= 0 and diff.max() <= 2
    assert yaml.safe_load((work / "synA" / "difference_scale.yaml").read_text())["range"] == [0.0, 2.0]


def test_synthesize_backward_age_is_partial_failure(work, tmp_path):
    args = ["synthesize", "--checkpoint", str(work / "runA" / "final.pt"), "--manifest",
            str(work / "pre" / "manifest.csv"), "--target-age", "1", "--out", str(tmp_path)]
    assert main(args) == EXIT_PARTIAL


def test_evaluate_identical_pairs(work, tmp_path):
    pairs = list(csv.DictReader(open(work / "ph" / "pairs.csv")))
    with open(work / "ph" / "same.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "followup", "synthetic", "age_out"])
        for p in pairs:
            w.writerow([p["subject_id"], p["followup"], p["followup"], p["age_out"]])
    assert main(["evaluate", "--pairs", str(work / "ph" / "same.csv"), "--slices", "30", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert rows and all(float(r["ssim"]) == 1.0 and float(r["mse"]) == 0 for r in rows)


def test_evaluate_with_checkpoint_and_predictor(work, tmp_path):
    assert main(["train-age-predictor", "--manifest", str(work / "pre" / "manifest.csv"), "--config",
                 str(work / "tiny.yaml"), "--slices", "30", "--out", str(tmp_path / "pred")]) == 0
    assert (tmp_path / "pred" / "predictor.pt").exists()
    assert main(["evaluate", "--pairs", str(work / "ph" / "pairs.csv"), "--checkpoint", str(work / "runA" / "final.pt"),
                 "--predictor", str(tmp_path / "pred" / "predictor.pt"), "--slices", "30",
                 "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert {r["method"] for r in rows} == {"synthetic", "baseline"}
    assert all(r["pad"] != "" for r in rows)
    summary = yaml.safe_load((tmp_path / "ev" / "summary.yaml").read_text())
    assert summary["conventions"]["ssim_window"] == 11


def test_checkpoint_mismatch_is_config_error(work, tmp_path):
    bad = dict(TINY, train=dict(TINY["train"], network={"widths": [2, 2, 2, 8]}))
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(bad))
    rc = main(["train", "--manifest", str(work / "pre" / "manifest.csv"), "--config", str(tmp_path / "bad.yaml"),
               "--steps", "4", "--slices", "30", "--resume", str(work / "runA" / "final.pt"), "--out", str(tmp_path / "r")])
    assert rc == EXIT_CONFIG


def test_ablate_grid_structure(work, tmp_path):
    cfg = {"train": dict(TINY["train"]), "predictor": TINY["predictor"]}
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(cfg))
    rc = main(["ablate", "--config", str(tmp_path / "a.yaml"), "--steps", "1", "--subjects", "10",
               "--predictor-subjects", "10", "--out", str(tmp_path / "abl")])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))
    by_grid = {}
    for r in rows:
        by_grid.setdefault(r["grid"], []).append(r["variant"])
    assert by_grid == {
        "losses": ["GAN", "GAN+rec", "GAN+ID", "GAN+ID+rec"],
        "encoding": ["one_hot", "continuous", "ordinal"],
        "latent": ["65", "130", "260"],
    }
    # the shared default row is trained once
    assert len({r["config_hash"] for r in rows}) == 8


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    for cmd in ("preprocess", "phantom-gen", "train", "synthesize", "evaluate", "train-age-predictor", "ablate"):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--verbose"):
            assert flag in text


def test_bad_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text("trian: {}\n")
    assert main(["phantom-gen", "--subjects", "2", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
