"""Per-pair evaluation records and their aggregate summary."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .metrics import METRIC_CONVENTION, mse, psnr_from_mse, ssim
from .predictor import AgePredictor

METRICS = ("ssim", "psnr", "mse", "pad")
CSV_COLUMNS = ("subject_id", "method", "target_age", "ssim", "psnr", "psnr_capped", "mse", "pad", "error")


@dataclass
class EvaluationPair:
    """A synthesized image (2D slice or stack of slices) and its ground truth.

    With ``baseline`` set, the unmodified input is scored against the same
    follow-up as a non-learned reference row.
    """

    subject_id: str
    synthetic: np.ndarray
    followup: np.ndarray
    target_age: float
    baseline: np.ndarray | None = None


@dataclass
class PairRecord:
    subject_id: str
    method: str
    target_age: float
    ssim: float = math.nan
    psnr: float = math.nan
    psnr_capped: bool = False
    mse: float = math.nan
    pad: float = math.nan
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class MetricsReport:
    records: list[PairRecord] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        return sorted({r.method for r in self.records})

    def values(self, metric: str, method: str = "synthetic") -> np.ndarray:
        vals = [getattr(r, metric) for r in self.records if r.method == method and r.ok]
        return np.array([v for v in vals if not math.isnan(v)], dtype=np.float64)

    def aggregate(self, method: str = "synthetic") -> dict[str, tuple[float, float]]:
        """Mean and population std of each metric over successful pairs."""
        out = {}
        for m in METRICS:
            v = self.values(m, method)
            out[m] = (float(v.mean()), float(v.std())) if len(v) else (math.nan, math.nan)
        return out

    @property
    def failures(self) -> list[PairRecord]:
        return [r for r in self.records if not r.ok]

    def write_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: _fmt(v) for k, v in asdict(r).items()})
        return path

    def summary(self) -> dict:
        return {
            "conventions": dict(METRIC_CONVENTION),
            "provenance": self.provenance,
            "n_pairs": sum(r.method == "synthetic" for r in self.records),
            "n_failures": len(self.failures),
            **{
                method: {m: {"mean": mu, "std": sd} for m, (mu, sd) in self.aggregate(method).items()}
                for method in self.methods()
            },
        }

    def write_summary(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.summary(), sort_keys=False))
        return path


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _score(image: np.ndarray, followup: np.ndarray) -> tuple[float, float, bool, float]:
    image, followup = np.asarray(image), np.asarray(followup)
    if image.shape != followup.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {followup.shape}")
    if image.ndim == 2:
        s = ssim(image, followup)
    elif image.ndim == 3:
        s = float(np.mean([ssim(a, b) for a, b in zip(image, followup)]))
    else:
        raise ValueError(f"expected a 2D slice or 3D stack, got {image.ndim}D")
    m = mse(image, followup)
    return s, psnr_from_mse(m), m == 0.0, m


def _pad_one(predictor: AgePredictor | None, image: np.ndarray, target: float) -> float:
    if predictor is None:
        return math.nan
    pred = predictor.predict(np.asarray(image))
    return float(np.mean(np.abs(pred - target)))


def evaluate_pairs(predictor: AgePredictor | None, pairs, provenance: dict | None = None) -> MetricsReport:
    """Score every pair; a failing pair is recorded and does not stop the run."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_pairs needs at least one pair")
    report = MetricsReport(provenance=dict(provenance or {}))
    for p in pairs:
        candidates = [("synthetic", p.synthetic)]
        if p.baseline is not None:
            candidates.append(("baseline", p.baseline))
        for method, image in candidates:
            rec = PairRecord(p.subject_id, method, float(p.target_age))
            try:
                rec.ssim, rec.psnr, rec.psnr_capped, rec.mse = _score(image, p.followup)
                rec.pad = _pad_one(predictor, image, p.target_age)
            except ValueError as exc:
                rec.error = str(exc)
            report.records.append(rec)
    return report
