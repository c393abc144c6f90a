"""Image similarity metrics over real/synthesized volume pairs.

All metrics are computed in float64. SSIM follows the Wang et al. weighted
form: 11-tap Gaussian window (sigma 1.5, truncate 3.5, reflect padding),
population covariance, K1=0.01, K2=0.03, and a border crop of the filter
radius before averaging the similarity map.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConstantImage, ShapeMismatch

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# radius as ndimage computes it; 11-tap window for sigma 1.5
SSIM_RADIUS = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
SSIM_WIN = 2 * SSIM_RADIUS + 1

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10


def renormalize_01(vol: np.ndarray) -> np.ndarray:
    """Min-max rescale a whole array to [0, 1]; rejects constant input."""
    vol = np.asarray(vol, dtype=np.float64)
    lo = float(vol.min())
    hi = float(vol.max())
    if hi == lo:
        raise ConstantImage(f"constant volume (value {lo}), cannot rescale to [0, 1]")
    return (vol - lo) / (hi - lo)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(data_range^2 / MSE), capped at 100 dB for near-exact matches."""
    err = mse(a, b)
    if err < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(data_range**2 / err))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM between two 2D images."""
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ShapeMismatch(f"ssim expects 2D images, got shape {a.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ShapeMismatch(
            f"image side {min(a.shape)} smaller than SSIM window {SSIM_WIN}"
        )
    smooth = lambda im: gaussian_filter(
        im, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect"
    )
    ux = smooth(a)
    uy = smooth(b)
    uxx = smooth(a * a)
    uyy = smooth(b * b)
    uxy = smooth(a * b)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux**2 + uy**2 + c1) * (vx + vy + c2)
    )
    pad = SSIM_RADIUS
    return float(s[pad:-pad, pad:-pad].mean())


def volume_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean over per-slice SSIM along the first (slice) axis of [D, H, W]."""
    a, b = _check_pair(a, b)
    if a.ndim != 3:
        raise ShapeMismatch(f"volume_ssim expects [D, H, W], got {a.shape}")
    return float(np.mean([ssim(a[z], b[z], data_range) for z in range(a.shape[0])]))
