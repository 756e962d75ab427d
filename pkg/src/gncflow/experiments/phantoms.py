"""Random ellipse phantoms."""

from __future__ import annotations

import numpy as np


def generate_ellipse_phantom(seed, n_px: int = 32) -> np.ndarray:
    """Sum of 1-8 random ellipses on [-1, 1]^2, clipped to [0, 1].

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    if n_px < 16:
        raise ValueError(f"phantoms need n_px >= 16, got {n_px}")
    rng = np.random.default_rng(seed)
    coords = (np.arange(n_px) - (n_px - 1) / 2.0) / (n_px / 2.0)
    yy, xx = np.meshgrid(-coords, coords, indexing="ij")
    img = np.zeros((n_px, n_px))
    for _ in range(int(rng.integers(1, 9))):
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        a, b = rng.uniform(0.1, 0.6, size=2)
        phi = rng.uniform(0.0, np.pi)
        value = rng.uniform(0.1, 1.0)
        u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    return np.clip(img, 0.0, 1.0)
