"""ASCII PGM (P2, maxval 65535) and flat CSV image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 65535


def write_pgm(path, image, vmin: float = 0.0, vmax: float = 1.0) -> None:
    """Write ``image`` clipped to [vmin, vmax] and quantised to 16 bits."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    if not vmax > vmin:
        raise ValueError("vmax must exceed vmin")
    scaled = np.clip((image - vmin) / (vmax - vmin), 0.0, 1.0)
    q = np.rint(scaled * MAXVAL).astype(np.int64)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", str(MAXVAL)]
    lines += [" ".join(map(str, row)) for row in q]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path, vmin: float = 0.0, vmax: float = 1.0) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:], dtype=np.int64)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel values, found {data.size}")
    return vmin + (vmax - vmin) * data.reshape(h, w) / maxval


def write_csv_image(path, image) -> None:
    np.savetxt(path, np.asarray(image, dtype=float), delimiter=",", fmt="%.17g")


def read_csv_image(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
