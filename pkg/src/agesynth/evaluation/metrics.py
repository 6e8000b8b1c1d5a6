"""Image similarity on [0, 1]-remapped intensities (peak value 1).

Slices live on [-1, 1]; every metric first maps x -> (x + 1) / 2. SSIM uses an
11x11 Gaussian window (sigma 1.5) over the valid region with the standard
constants K1 = 0.01, K2 = 0.03.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0
PSNR_CAP = 99.0

METRIC_CONVENTION = {
    "intensity_range": "[-1,1] remapped to [0,1]",
    "peak": DATA_RANGE,
    "ssim_window": SSIM_WINDOW,
    "ssim_sigma": SSIM_SIGMA,
    "ssim_k1": SSIM_K1,
    "ssim_k2": SSIM_K2,
    "psnr_cap_db": PSNR_CAP,
}


def to_unit(x) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = to_unit(a), to_unit(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float) -> float:
    """10 log10(peak^2 / mse); the infinite case is capped at PSNR_CAP."""
    if m <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(DATA_RANGE**2 / m), PSNR_CAP)


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def psnr_capped(a, b) -> bool:
    return mse(a, b) == 0.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, window: np.ndarray | None = None) -> np.ndarray:
    a, b = _pair(a, b)
    w = gaussian_window() if window is None else window
    if a.ndim != 2 or a.shape[0] < w.shape[0] or a.shape[1] < w.shape[1]:
        raise ValueError(f"SSIM needs 2D images at least {w.shape}, got {a.shape}")
    # the window is symmetric, so convolution equals correlation
    filt = lambda x: convolve2d(x, w, mode="valid")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (SSIM_K1 * DATA_RANGE) ** 2, (SSIM_K2 * DATA_RANGE) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))
