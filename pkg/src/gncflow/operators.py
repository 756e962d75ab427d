"""Linear forward operators with exact adjoints.

All operators accept a single vector (n,) or a batch (B, n) and return the
matching shape.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp


class LinearOperator:
    shape: tuple[int, int]

    @property
    def m(self) -> int:
        return self.shape[0]

    @property
    def n(self) -> int:
        return self.shape[1]

    def _check(self, v, expected, what):
        v = np.asarray(v, dtype=float)
        if v.ndim not in (1, 2) or v.shape[-1] != expected:
            raise ValueError(f"{what}: expected vectors of dimension {expected}, got shape {v.shape}")
        return v

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, y):
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(x)

    def normal(self, x):
        """A* A x."""
        return self.adjoint(self.apply(x))

    def norm_estimate(self, iters: int = 100, seed: int = 0) -> float:
        """Spectral norm by power iteration on A* A."""
        v = np.random.default_rng(seed).standard_normal(self.n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = self.normal(v)
            lam = np.linalg.norm(w)
            if lam == 0:
                return 0.0
            v = w / lam
        return math.sqrt(lam)


class DenseOperator(LinearOperator):
    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=float, ndmin=2)
        if matrix.ndim != 2:
            raise ValueError(f"dense operator needs a 2-D matrix, got shape {matrix.shape}")
        matrix.setflags(write=False)
        self.matrix = matrix
        self.shape = matrix.shape

    def apply(self, x):
        x = self._check(x, self.n, "apply")
        return x @ self.matrix.T

    def adjoint(self, y):
        y = self._check(y, self.m, "adjoint")
        return y @ self.matrix

    def __repr__(self):
        return f"DenseOperator({self.m}x{self.n})"


def load_matrix(path) -> DenseOperator:
    """Whitespace-separated rows, one matrix row per line."""
    return DenseOperator(np.loadtxt(path, ndmin=2))


class RadonOperator(LinearOperator):
    """Parallel-beam Radon transform of an ``n_px`` x ``n_px`` image.

    Pixel and detector spacing are both 1; the image centre is the rotation
    centre.  Rays are discretised with Joseph's method (linear interpolation
    between the two nearest pixels on every row or column crossed, weighted
    by the path length per step), assembled once as a sparse matrix whose
    transpose is the adjoint.

    Images are flattened row-major; row 0 is the top of the image.  Sinograms
    are flattened with shape (n_angles, n_det).
    """

    def __init__(self, n_px: int, angles, n_det: int | None = None):
        if n_px < 2:
            raise ValueError(f"n_px must be >= 2, got {n_px}")
        angles = np.array(angles, dtype=float, ndmin=1)
        if angles.size < 1:
            raise ValueError("need at least one angle")
        if n_det is None:
            n_det = math.ceil(n_px * math.sqrt(2.0))
        if n_det < 1:
            raise ValueError(f"detector count must be positive, got {n_det}")
        angles.setflags(write=False)
        self.n_px = n_px
        self.angles = angles
        self.n_det = n_det
        self.shape = (angles.size * n_det, n_px * n_px)
        self._matrix = _joseph_matrix(n_px, angles, n_det)
        self._matrix_t = self._matrix.T.tocsr()

    @property
    def detector_positions(self) -> np.ndarray:
        return np.arange(self.n_det) - (self.n_det - 1) / 2.0

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._matrix

    def apply(self, x):
        x = self._check(x, self.n, "apply")
        return (self._matrix @ x.T).T

    def adjoint(self, y):
        y = self._check(y, self.m, "adjoint")
        return (self._matrix_t @ y.T).T

    def sinogram(self, image) -> np.ndarray:
        return self.apply(np.asarray(image, dtype=float).ravel()).reshape(self.angles.size, self.n_det)

    def __repr__(self):
        return f"RadonOperator(n_px={self.n_px}, n_angles={self.angles.size}, n_det={self.n_det})"


def _joseph_matrix(n_px, angles, n_det):
    c = (n_px - 1) / 2.0
    s = np.arange(n_det) - (n_det - 1) / 2.0
    steps = np.arange(n_px) - c  # pixel-centre coordinates along the stepping axis
    rows, cols, vals = [], [], []
    for a, theta in enumerate(angles):
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        # ray: {p : p . (cos, sin) = s}, direction (-sin, cos)
        if abs(cos_t) >= abs(sin_t):
            # step over image rows (fixed y), interpolate along x
            y = steps[None, :]
            xs = (s[:, None] - y * sin_t) / cos_t
            frac_pos = xs + c  # column index coordinate
            step_idx = c - y  # row index (y up, rows down)
            weight = 1.0 / abs(cos_t)
            along_cols = True
        else:
            x = steps[None, :]
            ys = (s[:, None] - x * cos_t) / sin_t
            frac_pos = c - ys  # row index coordinate
            step_idx = x + c  # column index
            weight = 1.0 / abs(sin_t)
            along_cols = False
        frac_pos = np.broadcast_to(frac_pos, (n_det, n_px))
        step_idx = np.broadcast_to(step_idx, (n_det, n_px)).astype(int)
        lo = np.floor(frac_pos).astype(int)
        w_hi = frac_pos - lo
        ray = a * n_det + np.broadcast_to(np.arange(n_det)[:, None], (n_det, n_px))
        for idx, w in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
            ok = (idx >= 0) & (idx < n_px) & (w > 0)
            if along_cols:
                pix = step_idx[ok] * n_px + idx[ok]
            else:
                pix = idx[ok] * n_px + step_idx[ok]
            rows.append(ray[ok])
            cols.append(pix)
            vals.append(weight * w[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(len(angles) * n_det, n_px * n_px))
    return mat.tocsr()


def build_radon(n_px: int, n_angles: int, n_det: int | None = None) -> RadonOperator:
    """Radon operator with ``n_angles`` evenly spaced angles in [0, pi)."""
    if n_px < 2:
        raise ValueError(f"n_px must be >= 2, got {n_px}")
    if n_angles < 1:
        raise ValueError(f"n_angles must be >= 1, got {n_angles}")
    angles = np.arange(n_angles) * (math.pi / n_angles)
    return RadonOperator(n_px, angles, n_det)


def apply(op: LinearOperator, x):
    return op.apply(x)


def adjoint(op: LinearOperator, y):
    return op.adjoint(y)
