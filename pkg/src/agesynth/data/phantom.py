"""Procedural ageing phantoms for desk-scale checks.

Each phantom subject is an elliptical "brain" with a grey cortex band, white
matter, a dark central "ventricle" and a few landmark dots. Subject identity
(brain size and aspect, ventricle eccentricity and offset, dot positions) is
fixed per subject; age enlarges the ventricle linearly and thins the cortex,
both faster for more severe health states.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..conditioning import Health
from ..networks import IMAGE_SHAPE
from .manifest import DatasetManifest, ManifestRow, SubjectMeta
from .volumes import Volume

BACKGROUND, CORTEX, WHITE_MATTER, CSF, LANDMARK = -1.0, 0.0, 0.6, -0.8, 0.15
CENTER = (IMAGE_SHAPE[0] / 2 - 0.5, IMAGE_SHAPE[1] / 2 - 0.5)
# region that contains the ventricle at every age but no cortex
VENTRICLE_MASK_AXES = (52.0, 38.0)
RAW_CANVAS = (218, 182)


class PhantomSpecError(ValueError):
    pass


def _by_health(values: dict) -> dict[Health, float]:
    return {Health.parse(k): float(v) for k, v in values.items()}


@dataclass
class PhantomSpec:
    base_radius: float = 80.0
    ventricle_base_area: float = 500.0
    ventricle_growth: dict = field(default_factory=lambda: {"CN": 15.0, "MCI": 25.0, "AD": 40.0})
    cortex_base_thickness: float = 12.0
    cortex_thinning: dict = field(default_factory=lambda: {"CN": 0.04, "MCI": 0.06, "AD": 0.09})
    noise: float = 0.02
    age_range: tuple = (20, 90)
    reference_age: float = 20.0
    health_fractions: dict = field(default_factory=lambda: {"CN": 0.5, "MCI": 0.25, "AD": 0.25})
    test_fraction: float = 0.2
    n_slices: int = 64
    raw_scale: float = 400.0

    def __post_init__(self) -> None:
        self.age_range = tuple(int(a) for a in self.age_range)
        growth, thin = _by_health(self.ventricle_growth), _by_health(self.cortex_thinning)
        order = (Health.CN, Health.MCI, Health.AD)
        if set(growth) != set(order) or set(thin) != set(order):
            raise PhantomSpecError("rates must be given for CN, MCI and AD")
        if not growth[Health.CN] < growth[Health.MCI] < growth[Health.AD] or growth[Health.CN] <= 0:
            raise PhantomSpecError("ventricle growth must be positive and strictly increase CN < MCI < AD")
        if not 0 <= thin[Health.CN] < thin[Health.MCI] < thin[Health.AD]:
            raise PhantomSpecError("cortex thinning must strictly increase CN < MCI < AD")
        if self.noise < 0:
            raise PhantomSpecError("noise must be >= 0")
        lo, hi = self.age_range
        if not 0 <= lo < hi <= 100:
            raise PhantomSpecError(f"bad age range {self.age_range}")
        if not 0 <= self.test_fraction < 1:
            raise PhantomSpecError("test_fraction must lie in [0, 1)")
        if self.n_slices < 60:
            raise PhantomSpecError("phantom volumes need at least 60 slices")
        self.ventricle_growth = {k.value: v for k, v in growth.items()}
        self.cortex_thinning = {k.value: v for k, v in thin.items()}
        self.health_fractions = {Health.parse(k).value: float(v) for k, v in self.health_fractions.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["age_range"] = list(self.age_range)
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls(**(yaml.safe_load(Path(path).read_text()) or {}))

    def ventricle_area(self, age: float, health: Health | str) -> float:
        g = self.ventricle_growth[Health.parse(health).value]
        return max(self.ventricle_base_area + g * (age - self.reference_age), 50.0)

    def cortex_thickness(self, age: float, health: Health | str) -> float:
        k = self.cortex_thinning[Health.parse(health).value]
        return max(self.cortex_base_thickness - k * (age - self.reference_age), 3.0)


@dataclass(frozen=True)
class PhantomIdentity:
    brain_scale: float
    brain_aspect: float
    ventricle_ecc: float
    ventricle_offset: tuple[float, float]
    landmarks: tuple[tuple[float, float], ...]

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "PhantomIdentity":
        angles = rng.uniform(0, 2 * np.pi, size=4)
        radii = rng.uniform(0.8, 0.9, size=4)
        return cls(
            brain_scale=float(rng.uniform(0.92, 1.0)),
            brain_aspect=float(rng.uniform(0.74, 0.82)),
            ventricle_ecc=float(rng.uniform(0.55, 0.85)),
            ventricle_offset=(float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3))),
            landmarks=tuple((float(r * np.sin(t)), float(r * np.cos(t))) for r, t in zip(radii, angles)),
        )


@dataclass(frozen=True)
class PhantomSubject:
    index: int
    subject_id: str
    age: int
    health: Health
    split: str
    identity: PhantomIdentity

    @property
    def meta(self) -> SubjectMeta:
        return SubjectMeta(self.subject_id, self.age, self.health)


def _soft_ellipse(shape, center, ay: float, ax: float) -> np.ndarray:
    """Partial-volume coverage of an axis-aligned ellipse, in [0, 1]."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    r = np.sqrt((dy / ay) ** 2 + (dx / ax) ** 2)
    grad = np.sqrt((dy / ay**2) ** 2 + (dx / ax**2) ** 2) / np.maximum(r, 1e-9)
    dist = (r - 1.0) / np.maximum(grad, 1e-9)
    return np.clip(0.5 - dist, 0.0, 1.0)


def render_phantom(
    spec: PhantomSpec,
    identity: PhantomIdentity,
    age: float,
    health: Health | str,
    *,
    noise_rng: np.random.Generator | None = None,
    shape: tuple[int, int] = IMAGE_SHAPE,
    z_profile: float = 1.0,
) -> np.ndarray:
    """One axial phantom slice on the normalized [-1, 1] scale.

    ``z_profile`` in (0, 1] shrinks the anatomy for off-centre slices of a
    volume. No noise is added when ``noise_rng`` is None.
    """
    center = (shape[0] / 2 - 0.5, shape[1] / 2 - 0.5)
    ry = spec.base_radius * identity.brain_scale * z_profile
    rx = ry * identity.brain_aspect
    t = spec.cortex_thickness(age, health) * z_profile
    area = spec.ventricle_area(age, health) * z_profile**2
    vy = np.sqrt(area / (np.pi * identity.ventricle_ecc))
    vx = vy * identity.ventricle_ecc
    vc = (center[0] + identity.ventricle_offset[0], center[1] + identity.ventricle_offset[1])

    img = np.full(shape, BACKGROUND, dtype=np.float64)
    for value, cover in (
        (CORTEX, _soft_ellipse(shape, center, ry, rx)),
        (WHITE_MATTER, _soft_ellipse(shape, center, ry - t, rx - t)),
        (CSF, _soft_ellipse(shape, vc, vy, vx)),
    ):
        img += cover * (value - img)
    wy, wx = ry - t, rx - t
    for ly, lx in identity.landmarks:
        dot = _soft_ellipse(shape, (center[0] + ly * wy, center[1] + lx * wx), 3.0 * z_profile, 3.0 * z_profile)
        img += dot * (LANDMARK - img)
    if noise_rng is not None and spec.noise > 0:
        img = img + noise_rng.normal(0.0, spec.noise, size=shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def ventricle_area(img: np.ndarray) -> float:
    """Soft count of ventricle-dark pixels inside the fixed central mask.

    Each pixel contributes its darkness relative to white matter, clipped to
    [0, 1], so the statistic varies smoothly with the ventricle outline.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = _soft_ellipse(img.shape, CENTER, *VENTRICLE_MASK_AXES) > 0.5
    dark = np.clip((WHITE_MATTER - img) / (WHITE_MATTER - CSF), 0.0, 1.0)
    return float(dark[mask].sum())


@dataclass
class EvalPair:
    """Baseline and ground-truth follow-up of one subject (evaluation only)."""

    subject_id: str
    baseline: np.ndarray
    followup: np.ndarray
    age_in: int
    age_out: int
    health_in: Health
    health_out: Health


@dataclass
class PhantomDataset:
    spec: PhantomSpec
    subjects: list[PhantomSubject]
    images: np.ndarray
    noise_key: int

    def noise_rng(self, subject: PhantomSubject, age: float, z: int = -1) -> np.random.Generator:
        return np.random.default_rng([self.noise_key, subject.index, int(round(age * 1000)), z + 1])

    def render(self, subject: PhantomSubject, age: float | None = None, health=None, *, noise: bool = True) -> np.ndarray:
        age = subject.age if age is None else age
        health = subject.health if health is None else health
        rng = self.noise_rng(subject, age) if noise else None
        return render_phantom(self.spec, subject.identity, age, health, noise_rng=rng)

    def render_volume(self, subject: PhantomSubject, age: float | None = None, health=None) -> Volume:
        """Raw-intensity volume (scanner-like units, 218x182 in-plane) for the file pipeline."""
        age = subject.age if age is None else age
        health = subject.health if health is None else health
        n = self.spec.n_slices
        zc = (n - 1) / 2
        slices = []
        for z in range(n):
            profile = float(np.sqrt(max(1.0 - ((z - zc) / (0.75 * n)) ** 2, 0.05)))
            s = render_phantom(
                self.spec, subject.identity, age, health,
                noise_rng=self.noise_rng(subject, age, z), shape=RAW_CANVAS, z_profile=profile,
            )
            slices.append((s.astype(np.float64) + 1.0) * self.spec.raw_scale)
        affine = np.diag([1.0, 1.0, 1.0, 1.0])
        affine[:3, 3] = (-RAW_CANVAS[1] / 2, -RAW_CANVAS[0] / 2, -n / 2)
        return Volume(np.stack(slices).astype(np.float32), affine, SubjectMeta(subject.subject_id, age, health))

    def split(self, name: str) -> list[PhantomSubject]:
        return [s for s in self.subjects if s.split == name]

    def indices(self, split: str | None = None, health: Health | None = None) -> np.ndarray:
        return np.array(
            [i for i, s in enumerate(self.subjects)
             if (split is None or s.split == split) and (health is None or s.health == health)],
            dtype=np.int64,
        )

    def manifest(self, path_for=lambda s: f"{s.subject_id}.nii.gz") -> DatasetManifest:
        return DatasetManifest([ManifestRow(s.meta, path_for(s), s.split) for s in self.subjects])

    def longitudinal_pairs(self, years=(10, 20, 30), split: str = "test", health: Health | None = None) -> list[EvalPair]:
        """Ground-truth follow-ups rendered at later ages; never used for training."""
        out = []
        for s in self.split(split):
            if health is not None and s.health != health:
                continue
            for dy in years:
                a_o = s.age + dy
                if a_o > 100:
                    continue
                out.append(EvalPair(s.subject_id, self.images[s.index], self.render(s, a_o),
                                    s.age, a_o, s.health, s.health))
        return out


def generate_phantom_dataset(spec: PhantomSpec, n_subjects: int, rng) -> PhantomDataset:
    rng = np.random.default_rng(rng)
    if n_subjects < 1:
        raise PhantomSpecError("n_subjects must be >= 1")
    healths = [Health.parse(h) for h in spec.health_fractions]
    probs = np.array([spec.health_fractions[h.value] for h in healths], dtype=np.float64)
    probs /= probs.sum()
    n_test = int(round(n_subjects * spec.test_fraction))
    test_idx = set(rng.permutation(n_subjects)[:n_test].tolist())
    noise_key = int(rng.integers(0, 2**62))
    lo, hi = spec.age_range
    subjects = []
    for i in range(n_subjects):
        subjects.append(PhantomSubject(
            index=i,
            subject_id=f"phantom-{i:04d}",
            age=int(rng.integers(lo, hi + 1)),
            health=healths[int(rng.choice(len(healths), p=probs))],
            split="test" if i in test_idx else "train",
            identity=PhantomIdentity.draw(rng),
        ))
    ds = PhantomDataset(spec, subjects, np.empty((0, *IMAGE_SHAPE), np.float32), noise_key)
    ds.images = np.stack([ds.render(s) for s in subjects]) if subjects else ds.images
    return ds
