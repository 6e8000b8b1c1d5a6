"""In-memory slice collections used by training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..conditioning import Health
from .manifest import DatasetManifest
from .phantom import PhantomDataset
from .volumes import load_volume, preprocess_volume


class DatasetError(ValueError):
    pass


@dataclass
class SliceDataset:
    """Stacked 208x160 slices with per-slice subject metadata."""

    images: np.ndarray
    ages: np.ndarray
    health: list[Health]
    subject_ids: list[str]
    slice_index: np.ndarray

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.ages = np.asarray(self.ages, dtype=np.float64)
        self.slice_index = np.asarray(self.slice_index, dtype=np.int64)
        n = len(self.images)
        if not (len(self.ages) == len(self.health) == len(self.subject_ids) == len(self.slice_index) == n):
            raise DatasetError("slice dataset fields have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def severity(self) -> np.ndarray:
        return np.array([h.severity for h in self.health], dtype=np.int64)

    def subset(self, idx) -> "SliceDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SliceDataset(
            self.images[idx], self.ages[idx], [self.health[i] for i in idx],
            [self.subject_ids[i] for i in idx], self.slice_index[idx],
        )

    @classmethod
    def from_phantoms(cls, ds: PhantomDataset, split: str | None = "train", health: Health | None = None) -> "SliceDataset":
        idx = ds.indices(split, health)
        subs = [ds.subjects[i] for i in idx]
        return cls(ds.images[idx], [s.age for s in subs], [s.health for s in subs],
                   [s.subject_id for s in subs], np.zeros(len(idx), np.int64))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str | None = "train", slices=None,
                      health: Health | None = None) -> "SliceDataset":
        """Load (and preprocess if needed) every active volume of ``split``.

        ``slices`` optionally restricts which of the 60 axial positions are kept.
        """
        images, ages, hs, ids, pos = [], [], [], [], []
        for row in manifest.active(split):
            if health is not None and row.meta.health != health:
                continue
            sl = preprocess_volume(load_volume(manifest.resolve(row)))
            keep = range(len(sl)) if slices is None else slices
            for k in keep:
                images.append(sl[k])
                ages.append(row.meta.age)
                hs.append(row.meta.health)
                ids.append(row.subject_id)
                pos.append(k)
        if not images:
            raise DatasetError(f"manifest has no active rows for split {split!r}")
        return cls(np.stack(images), ages, hs, ids, pos)
