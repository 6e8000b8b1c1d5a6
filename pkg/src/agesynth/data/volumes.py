"""Volume I/O, intensity normalization, slice extraction and re-stacking.

Volumes are held axial-first, ``voxels[z, y, x]``: an axial slice is a
``(height, width)`` image. NIfTI files store ``(x, y, z)``; the transpose is
applied on read and undone on write, and the affine always refers to the
file's ``(x, y, z)`` voxel order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np

from ..networks import IMAGE_SHAPE, ShapeError

N_SLICES = 60
CLIP_PERCENTILE = 99.5
NORMALIZED_TAG = b"agesynth:normalized"


class VolumeIOError(OSError):
    pass


class DegenerateVolumeError(ValueError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    meta: object | None = None
    normalized: bool = False

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume has non-finite voxels")
        self.affine = np.asarray(self.affine, dtype=np.float64)

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]


def load_volume(path: str | os.PathLike, meta=None) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise VolumeIOError(f"no such volume file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:  # nibabel raises assorted types for corrupt input
        raise VolumeIOError(f"cannot read volume {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeIOError(f"{path}: expected a 3D volume, got shape {data.shape}")
    descrip = bytes(img.header.get("descrip", b"")).rstrip(b"\x00") if hasattr(img, "header") else b""
    return Volume(
        voxels=np.ascontiguousarray(data.transpose(2, 1, 0)),
        affine=img.affine,
        meta=meta,
        normalized=descrip.startswith(NORMALIZED_TAG),
    )


def save_volume(vol: Volume, path: str | os.PathLike, dtype=np.float32) -> Path:
    """Write ``vol`` as NIfTI; integer dtypes round to the nearest value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(vol.voxels.transpose(2, 1, 0))
    dtype = np.dtype(dtype)
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        data = np.clip(np.rint(data), info.min, info.max)
    data = data.astype(dtype)
    img = nib.Nifti1Image(data, vol.affine)
    img.header.set_xyzt_units("mm")
    if vol.normalized:
        img.header["descrip"] = NORMALIZED_TAG
    nib.save(img, str(path))
    return path


def normalize_intensities(voxels: np.ndarray) -> np.ndarray:
    """Clip to [0, V99.5] over the whole volume and map linearly onto [-1, 1]."""
    v995 = float(np.percentile(voxels, CLIP_PERCENTILE))
    if not v995 > 0:
        raise DegenerateVolumeError(f"99.5th percentile intensity is {v995}; nothing to normalize")
    clipped = np.clip(voxels.astype(np.float64), 0.0, v995)
    return (2.0 * clipped / v995 - 1.0).astype(np.float32)


def middle_slice_start(n_slices: int, count: int = N_SLICES) -> int:
    if n_slices < count:
        raise ShapeError(f"volume has {n_slices} axial slices; at least {count} are required")
    return (n_slices - count) // 2


def _crop_or_pad_offsets(size: int, target: int) -> tuple[int, int, int]:
    """(source start, dest start, length) for centring ``size`` into ``target``."""
    if size >= target:
        return (size - target) // 2, 0, target
    return 0, (target - size) // 2, size


def fit_slice(img: np.ndarray, shape: tuple[int, int] = IMAGE_SHAPE, fill: float = -1.0) -> np.ndarray:
    out = np.full(shape, fill, dtype=np.float32)
    (sy, dy, ny), (sx, dx, nx) = (_crop_or_pad_offsets(img.shape[i], shape[i]) for i in range(2))
    out[dy : dy + ny, dx : dx + nx] = img[sy : sy + ny, sx : sx + nx]
    return out


def _subvolume_affine(vol: Volume, z0: int) -> np.ndarray:
    (sy, dy, _), (sx, dx, _) = (_crop_or_pad_offsets(vol.voxels.shape[i + 1], IMAGE_SHAPE[i]) for i in range(2))
    shift = np.eye(4)
    # new voxel (x', y', z') sits at old voxel (x' + sx - dx, y' + sy - dy, z' + z0)
    shift[:3, 3] = (sx - dx, sy - dy, z0)
    return vol.affine @ shift


def preprocess_volume(vol: Volume) -> list[np.ndarray]:
    """Normalize, take the middle 60 axial slices, and centre-fit them to 208x160.

    A volume already produced by this function (flagged ``normalized`` and
    shaped 60x208x160) is returned slice-for-slice unchanged.
    """
    if vol.normalized and vol.voxels.shape == (N_SLICES, *IMAGE_SHAPE):
        return [np.array(s, dtype=np.float32) for s in vol.voxels]
    z0 = middle_slice_start(vol.n_slices)
    norm = normalize_intensities(vol.voxels)
    return [fit_slice(norm[z]) for z in range(z0, z0 + N_SLICES)]


def preprocessed_header(vol: Volume) -> Volume:
    """Metadata-only volume describing where preprocessed slices sit in space."""
    if vol.normalized and vol.voxels.shape == (N_SLICES, *IMAGE_SHAPE):
        return replace(vol, voxels=np.zeros((1, 1, 1), np.float32))
    z0 = middle_slice_start(vol.n_slices)
    return Volume(np.zeros((1, 1, 1), np.float32), _subvolume_affine(vol, z0), vol.meta, True)


def stack_slices(slices, metadata: Volume | None = None) -> Volume:
    """Stack 60 axial slices back into a normalized volume in their original order."""
    slices = list(slices)
    if len(slices) != N_SLICES:
        raise ShapeError(f"need exactly {N_SLICES} slices, got {len(slices)}")
    for k, s in enumerate(slices):
        if np.shape(s) != IMAGE_SHAPE:
            raise ShapeError(f"slice {k} has shape {np.shape(s)}, expected {IMAGE_SHAPE}")
    affine = metadata.affine if metadata is not None else np.eye(4)
    meta = metadata.meta if metadata is not None else None
    return Volume(np.stack([np.asarray(s, np.float32) for s in slices]), affine, meta, True)


def sagittal_view(vol: Volume, x: int | None = None) -> np.ndarray:
    x = vol.voxels.shape[2] // 2 if x is None else x
    return vol.voxels[:, :, x]


def coronal_view(vol: Volume, y: int | None = None) -> np.ndarray:
    y = vol.voxels.shape[1] // 2 if y is None else y
    return vol.voxels[:, y, :]


def interslice_discontinuity(vol: Volume) -> float:
    """Mean |axial step| over mean |in-plane step| across the volume.

    Stacks of slices that vary smoothly along z score near or below 1; stacks
    with independent per-slice artefacts score well above.
    """
    v = vol.voxels.astype(np.float64)
    dz = np.abs(np.diff(v, axis=0)).mean()
    dxy = 0.5 * (np.abs(np.diff(v, axis=1)).mean() + np.abs(np.diff(v, axis=2)).mean())
    if dxy == 0:
        return 0.0 if dz == 0 else float("inf")
    return float(dz / dxy)
