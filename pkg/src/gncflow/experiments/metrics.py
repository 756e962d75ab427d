"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(x, ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean(np.square(x - ref)))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _filter(img, kernel):
    """Separable filtering with mirror ('symmetric') boundary handling."""
    pad = len(kernel) // 2
    out = np.pad(img, pad, mode="symmetric")
    out = np.apply_along_axis(np.convolve, 0, out, kernel, mode="valid")
    out = np.apply_along_axis(np.convolve, 1, out, kernel, mode="valid")
    return out


def ssim(x, ref, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use population (biased) variances; the mean is taken
    over pixels at least half a window away from the border.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D images with sides >= {SSIM_WINDOW}, got {x.shape}")
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter(x, k)
    mu_y = _filter(ref, k)
    sxx = _filter(x * x, k) - mu_x**2
    syy = _filter(ref * ref, k) - mu_y**2
    sxy = _filter(x * ref, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    smap = num / den
    pad = (SSIM_WINDOW - 1) // 2
    return float(smap[pad:-pad, pad:-pad].mean())
