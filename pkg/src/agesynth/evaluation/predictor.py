"""VGG-style age regressor used as a proxy metric for synthesized images."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..data.dataset import DatasetError, SliceDataset

PREDICTOR_FORMAT = "agesynth-age-predictor/1"


@dataclass(frozen=True)
class AgePredictorConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    dense: int = 64
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("age predictor needs >= 1 block, epoch and batch element")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class VGGRegressor(nn.Module):
    """(conv3-conv3-maxpool) blocks, global average pool, two dense layers."""

    def __init__(self, channels: tuple[int, ...], dense: int) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        cin = 1
        for c in channels:
            layers += [nn.Conv2d(cin, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            cin = c
        self.features = nn.Sequential(*layers)
        self.fc1 = nn.Linear(cin, dense)
        self.fc2 = nn.Linear(dense, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(h))).squeeze(1)


@dataclass
class AgePredictor:
    config: AgePredictorConfig
    net: VGGRegressor
    age_mean: float
    age_std: float
    val_mae: float = float("nan")
    history: list = field(default_factory=list)

    @torch.no_grad()
    def predict(self, images, batch_size: int = 32) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.ndim == 2:
            imgs = imgs[None]
        self.net.eval()
        out = []
        for s in range(0, len(imgs), batch_size):
            x = torch.from_numpy(imgs[s : s + batch_size])[:, None]
            out.append(self.net(x).numpy() * self.age_std + self.age_mean)
        return np.concatenate(out).astype(np.float64) if out else np.zeros(0)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": PREDICTOR_FORMAT,
            "config": self.config.to_dict(),
            "state": self.net.state_dict(),
            "age_mean": self.age_mean,
            "age_std": self.age_std,
            "val_mae": self.val_mae,
            "history": self.history,
        }, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AgePredictor":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(blob, dict) or blob.get("format") != PREDICTOR_FORMAT:
            raise ValueError(f"{path} is not an age predictor archive")
        cfg = AgePredictorConfig(**blob["config"])
        net = VGGRegressor(cfg.channels, cfg.dense)
        net.load_state_dict(blob["state"])
        return cls(cfg, net, blob["age_mean"], blob["age_std"], blob["val_mae"], blob["history"])


def _split_by_subject(dataset: SliceDataset, frac: float, rng: np.random.Generator):
    subjects = sorted(set(dataset.subject_ids))
    order = rng.permutation(len(subjects))
    n_val = max(1, int(round(frac * len(subjects))))
    val = {subjects[i] for i in order[:n_val]}
    is_val = np.array([s in val for s in dataset.subject_ids])
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


def train_age_predictor(dataset: SliceDataset, config: AgePredictorConfig = AgePredictorConfig(),
                        validation: SliceDataset | None = None) -> AgePredictor:
    """Fit the regressor with an L1 objective; records validation MAE in years.

    Without an explicit ``validation`` set, a subject-disjoint fraction of
    ``dataset`` is held out.
    """
    if len(np.unique(dataset.ages)) < 2:
        raise DatasetError("age predictor needs at least 2 distinct ages")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    if validation is None:
        tr_idx, va_idx = _split_by_subject(dataset, config.val_fraction, rng)
        train_set, validation = dataset.subset(tr_idx), dataset.subset(va_idx)
    else:
        train_set = dataset
    mean, std = float(train_set.ages.mean()), float(train_set.ages.std()) or 1.0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = VGGRegressor(config.channels, config.dense)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    predictor = AgePredictor(config, net, mean, std)
    x_all = torch.from_numpy(train_set.images)[:, None]
    y_all = torch.from_numpy(((train_set.ages - mean) / std).astype(np.float32))
    n = len(train_set)
    for epoch in range(config.epochs):
        net.train()
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[s : s + config.batch_size])
            loss = (net(x_all[idx]) - y_all[idx]).abs().mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item() * std)
        val_mae = float(np.mean(np.abs(predictor.predict(validation.images) - validation.ages)))
        predictor.history.append({"epoch": epoch, "train_mae": float(np.mean(losses)), "val_mae": val_mae})
    predictor.val_mae = predictor.history[-1]["val_mae"]
    return predictor


def pad_from_predictions(predicted, target_ages) -> float:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    t = np.asarray(target_ages, dtype=np.float64).ravel()
    if len(p) == 0:
        raise ValueError("PAD of an empty set is undefined")
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} target ages")
    return float(np.mean(np.abs(p - t)))


def pad(predictor: AgePredictor, images, target_ages) -> float:
    """Mean |f_pred(image) - target age| in years."""
    images = list(images) if not isinstance(images, np.ndarray) else images
    if len(images) == 0:
        raise ValueError("PAD of an empty set is undefined")
    if len(images) != len(np.ravel(target_ages)):
        raise ValueError("images and target ages differ in length")
    return pad_from_predictions(predictor.predict(np.asarray(images)), target_ages)


__all__ = ["AgePredictor", "AgePredictorConfig", "VGGRegressor", "pad", "pad_from_predictions", "train_age_predictor"]
