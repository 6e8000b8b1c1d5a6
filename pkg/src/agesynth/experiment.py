"""Phantom experiments: smoke training, behavioural checks and ablation grids.

Everything here runs on procedurally generated ageing phantoms, where ground
truth for identity, age and health state is known exactly.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import derive_seed
from .conditioning import EncodingScheme, Health, encode_age, encode_health
from .data.dataset import SliceDataset
from .data.phantom import PhantomDataset, PhantomSpec, generate_phantom_dataset, ventricle_area
from .evaluation.metrics import mse
from .evaluation.predictor import AgePredictor, AgePredictorConfig, pad_from_predictions, train_age_predictor
from .evaluation.report import EvaluationPair, evaluate_pairs
from .networks import Generator
from .trainer import TrainConfig, load_checkpoint, resolve_config, total_steps, train

log = logging.getLogger(__name__)

DELTAS = (0, 10, 20, 30)


@dataclass(frozen=True)
class PhantomExperiment:
    """A phantom cohort plus the training budget applied to it."""

    n_subjects: int = 200
    steps: int = 2000
    seed: int = 0
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    predictor: AgePredictorConfig = field(default_factory=AgePredictorConfig)
    predictor_subjects: int = 400

    def cohort(self) -> PhantomDataset:
        return generate_phantom_dataset(self.spec, self.n_subjects, derive_seed(self.seed, "phantom"))

    def train_config(self, **changes) -> TrainConfig:
        return replace(self.train, max_steps=self.steps, **changes)


def synthesize(G: Generator, images, a_d, health, scheme: EncodingScheme | None = None,
               batch_size: int = 16) -> np.ndarray:
    """Batched G(x, a_d, h); ``a_d`` and ``health`` are scalars or per-image sequences."""
    scheme = scheme or G.cfg.scheme
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    a_d = np.broadcast_to(np.asarray(a_d, dtype=np.float64), (n,))
    health = [health] * n if isinstance(health, (str, Health)) else list(health)
    a_codes = np.stack([encode_age(a, scheme) for a in a_d])
    h_codes = np.stack([encode_health(h) for h in health])
    out = []
    G.eval()
    with torch.no_grad():
        for s in range(0, n, batch_size):
            x = torch.from_numpy(images[s : s + batch_size])[:, None]
            y = G(x, torch.from_numpy(a_codes[s : s + batch_size]), torch.from_numpy(h_codes[s : s + batch_size]))
            out.append(y[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0, *images.shape[1:]), np.float32)


def eligible_test_subjects(phantoms: PhantomDataset, max_delta: int = DELTAS[-1]):
    """Test phantoms whose oldest target age stays inside the phantom age range."""
    hi = phantoms.spec.age_range[1]
    return [s for s in phantoms.split("test") if s.age + max_delta <= hi]


def train_phantom_predictor(spec: PhantomSpec, config: AgePredictorConfig, n_subjects: int = 400,
                            seed: int = 0) -> AgePredictor:
    """Age regressor fitted on a separate cohort of CN phantoms.

    Phantom age is only identifiable within one health state (disease speeds
    up ventricle growth), so the proxy is trained and applied on CN.
    """
    cn_only = replace(spec, health_fractions={"CN": 1.0}, test_fraction=0.0)
    cohort = generate_phantom_dataset(cn_only, n_subjects, np.random.SeedSequence([seed, 3]))
    return train_age_predictor(SliceDataset.from_phantoms(cohort, split=None), replace(config, seed=seed))


@dataclass
class BehaviourReport:
    recon_mse: float
    monotone_fraction: float
    n_subjects: int
    growth: dict
    pad_synthetic: float
    pad_identity: float
    areas: list = field(default_factory=list)

    @property
    def checks(self) -> dict[str, bool]:
        return {
            "reconstruction": self.recon_mse < 0.05,
            "monotone": self.monotone_fraction >= 0.9,
            "disease_rate": self.growth["AD"] >= self.growth["CN"],
            "pad": self.pad_synthetic < self.pad_identity,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checks"] = self.checks
        return d


def behavioural_suite(G: Generator, phantoms: PhantomDataset, predictor: AgePredictor | None,
                      deltas=DELTAS) -> BehaviourReport:
    subjects = eligible_test_subjects(phantoms, max(deltas))
    if not subjects:
        raise ValueError("no test phantoms young enough for the requested age steps")
    x = phantoms.images[[s.index for s in subjects]]
    native = [s.health for s in subjects]
    recon = synthesize(G, x, 0, native)
    recon_mse = float(np.mean([mse(a, b) for a, b in zip(x, recon)]))

    areas = np.array([[ventricle_area(img) for img in synthesize(G, x, d, native)] for d in deltas]).T
    monotone = float(np.mean(np.all(np.diff(areas, axis=1) >= 0, axis=1)))

    growth = {}
    for h in (Health.CN, Health.AD):
        start = np.array([ventricle_area(i) for i in synthesize(G, x, 0, h)])
        end = np.array([ventricle_area(i) for i in synthesize(G, x, max(deltas), h)])
        growth[h.value] = float(np.mean(end - start))

    pad_syn = pad_id = math.nan
    cn = [k for k, s in enumerate(subjects) if s.health == Health.CN]
    if predictor is not None and cn:
        steps = [d for d in deltas if d > 0]
        targets = np.array([subjects[k].age + d for d in steps for k in cn], dtype=np.float64)
        fakes = np.concatenate([synthesize(G, x[cn], d, Health.CN) for d in steps])
        pad_syn = pad_from_predictions(predictor.predict(fakes), targets)
        pad_id = pad_from_predictions(predictor.predict(np.concatenate([x[cn]] * len(steps))), targets)
    return BehaviourReport(recon_mse, monotone, len(subjects), growth, pad_syn, pad_id, areas.tolist())


# Each grid maps a row label to the changes it applies to the base run.
ABLATION_GRIDS: dict[str, dict[str, dict]] = {
    "losses": {
        "GAN": {"loss_weights": {"lambda_id": 0.0, "lambda_rec": 0.0}},
        "GAN+rec": {"loss_weights": {"lambda_id": 0.0}},
        "GAN+ID": {"loss_weights": {"lambda_rec": 0.0}},
        "GAN+ID+rec": {},
    },
    "encoding": {
        "one_hot": {"network": {"encoding": "one_hot"}},
        "continuous": {"network": {"encoding": "continuous"}},
        "ordinal": {},
    },
    "latent": {
        "65": {"network": {"v2_size": 65}},
        "130": {},
        "260": {"network": {"v2_size": 260}},
    },
    "embedding": {
        "transformer": {},
        "concat_all": {"network": {"embedding": "concat_all"}},
    },
}
DEFAULT_GRIDS = ("losses", "encoding", "latent")
ABLATION_COLUMNS = (
    "grid", "variant", "n_pairs", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std",
    "mse_mean", "mse_std", "pad_mean", "pad_std", "monotone_fraction", "config_hash",
)


def apply_changes(config: TrainConfig, changes: dict) -> TrainConfig:
    kw = {k: v for k, v in changes.items() if k not in ("loss_weights", "network")}
    if "loss_weights" in changes:
        kw["loss_weights"] = replace(config.loss_weights, **changes["loss_weights"])
    if "network" in changes:
        kw["network"] = replace(config.network, **changes["network"])
    return replace(config, **kw)


@dataclass
class AblationRow:
    grid: str
    variant: str
    n_pairs: int
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    mse_mean: float
    mse_std: float
    pad_mean: float
    pad_std: float
    monotone_fraction: float
    config_hash: str


def score_generator(G: Generator, phantoms: PhantomDataset, predictor: AgePredictor | None,
                    years=(10, 20, 30)) -> tuple[dict, BehaviourReport]:
    """Image metrics against ground-truth follow-ups; PAD on the CN pairs."""
    pairs = [p for p in phantoms.longitudinal_pairs(years) if p.age_out <= phantoms.spec.age_range[1]]
    fakes = synthesize(G, [p.baseline for p in pairs], [p.age_out - p.age_in for p in pairs],
                       [p.health_out for p in pairs])
    report = evaluate_pairs(None, [EvaluationPair(p.subject_id, f, p.followup, p.age_out)
                                   for p, f in zip(pairs, fakes)])
    agg = report.aggregate()
    cn = [k for k, p in enumerate(pairs) if p.health_out == Health.CN]
    if predictor is not None and cn:
        err = np.abs(predictor.predict(fakes[cn]) - np.array([pairs[k].age_out for k in cn], dtype=np.float64))
        agg["pad"] = (float(err.mean()), float(err.std()))
    agg["n_pairs"] = len(pairs)
    return agg, behavioural_suite(G, phantoms, predictor)


def train_or_load(config: TrainConfig, dataset: SliceDataset, out: Path | None) -> Generator:
    """Generator trained under ``config``, reusing a finished run stored under ``out``."""
    if out is None:
        return train(config, dataset).state.G
    run_dir = out / "runs" / config.config_hash()
    final = run_dir / "final.pt"
    if final.exists():
        state = load_checkpoint(final, config)
        if state.step >= total_steps(resolve_config(config, dataset)):
            log.info("reusing finished run %s", run_dir)
            return state.G
    return train(config, dataset, out_dir=run_dir).state.G


def run_ablation(experiment: PhantomExperiment, grids=DEFAULT_GRIDS, out_dir: str | os.PathLike | None = None,
                 predictor: AgePredictor | None = None, phantoms: PhantomDataset | None = None) -> list[AblationRow]:
    """Train every grid row on the phantom cohort and tabulate its scores.

    Rows whose resolved configuration coincides (the default row of each
    grid) are trained once and shared. With ``out_dir``, a run whose
    ``runs/<config hash>/final.pt`` already exists is loaded, not retrained.
    """
    unknown = [g for g in grids if g not in ABLATION_GRIDS]
    if unknown:
        raise ValueError(f"unknown ablation grids {unknown}; choose from {sorted(ABLATION_GRIDS)}")
    phantoms = phantoms or experiment.cohort()
    if predictor is None:
        predictor = train_phantom_predictor(experiment.spec, experiment.predictor,
                                            experiment.predictor_subjects, experiment.seed)
    dataset = SliceDataset.from_phantoms(phantoms, "train")
    out = Path(out_dir) if out_dir is not None else None
    cache: dict[str, tuple[dict, BehaviourReport]] = {}
    rows = []
    for grid in grids:
        for variant, changes in ABLATION_GRIDS[grid].items():
            cfg = apply_changes(experiment.train_config(), changes)
            key = cfg.config_hash()
            if key not in cache:
                log.info("ablation %s/%s (config %s)", grid, variant, key)
                cache[key] = score_generator(train_or_load(cfg, dataset, out), phantoms, predictor)
            agg, beh = cache[key]
            rows.append(AblationRow(
                grid, variant, agg["n_pairs"], *agg["ssim"], *agg["psnr"], *agg["mse"], *agg["pad"],
                beh.monotone_fraction, key,
            ))
    if out is not None:
        write_ablation_csv(rows, out / "ablation.csv")
    return rows


def write_ablation_csv(rows, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
    return path


def read_ablation_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
