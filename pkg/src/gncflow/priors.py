"""Gaussian-mixture priors with closed-form diffusion smoothing.

A mixture sum_k w_k N(mu_k, Sigma_k) pushed through the kernel
N(gamma_t x0, nu_t^2 I) stays a mixture with means gamma_t mu_k and
covariances gamma_t^2 Sigma_k + nu_t^2 I.  Covariances are kept as
eigendecompositions so that this map, the log-density and the score can be
evaluated for a batch of points that each sit at a different time.
"""

from __future__ import annotations

import math

import numpy as np

from .schedules import DiffusionSchedule, kernel_params

LOG_2PI = math.log(2.0 * math.pi)

# (means, covariance) of the default two-dimensional toy mixture; (1, 1) is the
# component placed at the global minimiser of the toy objective.
TOY_MEANS = ((1.0, 1.0), (-4.0, 3.0), (4.0, -3.0), (-3.0, -4.0), (3.0, 4.0))
TOY_COV_SCALE = 0.5

# below this dimension squared distances are accumulated coordinate-wise (no cancellation)
_EXACT_DIST_MAX_DIM = 16


class GaussianMixture:
    """Immutable Gaussian mixture.

    Parameters
    ----------
    weights : (K,) array
        Positive component weights; normalised to sum to one.
    means : (K, n) array
    covariances : (K, n, n) array, optional
        Symmetric positive definite matrices.  Mutually exclusive with
        ``variances``.
    variances : (K,) array, optional
        Isotropic covariances ``variances[k] * I``.
    """

    def __init__(self, weights, means, covariances=None, variances=None):
        means = np.array(means, dtype=float, ndmin=2)
        weights = np.array(weights, dtype=float, ndmin=1)
        K, n = means.shape
        if weights.shape != (K,):
            raise ValueError(f"expected {K} weights, got shape {weights.shape}")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("mixture weights must be positive and finite")
        if (covariances is None) == (variances is None):
            raise ValueError("give exactly one of covariances or variances")

        if variances is not None:
            variances = np.array(variances, dtype=float, ndmin=1)
            if variances.shape != (K,):
                raise ValueError(f"expected {K} variances, got shape {variances.shape}")
            if np.any(variances <= 0):
                raise ValueError("isotropic variances must be positive")
            eigvecs, eigvals = None, variances[:, None]
        else:
            covariances = np.array(covariances, dtype=float)
            if covariances.shape != (K, n, n):
                raise ValueError(f"expected covariances of shape {(K, n, n)}, got {covariances.shape}")
            if not np.allclose(covariances, np.swapaxes(covariances, 1, 2), rtol=1e-12, atol=1e-14):
                raise ValueError("covariances must be symmetric")
            try:
                np.linalg.cholesky(covariances)
            except np.linalg.LinAlgError as err:
                raise ValueError("covariances must be positive definite") from err
            scale = covariances[:, 0, 0]
            if np.array_equal(covariances, scale[:, None, None] * np.eye(n)):
                eigvecs, eigvals = None, scale[:, None].copy()
            else:
                eigvals, eigvecs = np.linalg.eigh(covariances)
            if np.any(eigvals <= 0):
                raise ValueError("covariances must be positive definite")

        self._init(weights / weights.sum(), means, eigvecs, eigvals)

    def _init(self, weights, means, eigvecs, eigvals):
        self.weights = weights
        self.means = means
        # eigvecs is None for isotropic components; eigvals is then (K, 1)
        self._eigvecs = eigvecs
        self._eigvals = eigvals
        self.log_weights = np.log(weights)
        self._mean_sq = np.square(means).sum(axis=1)
        # one shared isotropic variance (e.g. a kernel density estimate)
        self._shared_var = eigvecs is None and bool(np.all(eigvals == eigvals[0, 0]))
        for a in (self.weights, self.means, self.log_weights, self._eigvals, self._mean_sq):
            a.setflags(write=False)
        if eigvecs is not None:
            eigvecs.setflags(write=False)

    @classmethod
    def _from_parts(cls, weights, means, eigvecs, eigvals):
        obj = cls.__new__(cls)
        obj._init(weights, means, eigvecs, eigvals)
        return obj

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_isotropic(self) -> bool:
        return self._eigvecs is None

    @property
    def covariances(self) -> np.ndarray:
        """Dense (K, n, n) covariance matrices (materialised on demand)."""
        if self._eigvecs is None:
            return self._eigvals[:, 0, None, None] * np.eye(self.dim)
        U, s = self._eigvecs, self._eigvals
        return np.einsum("kij,kj,klj->kil", U, s, U)

    def __repr__(self):
        kind = "isotropic" if self.is_isotropic else "full"
        return f"GaussianMixture(K={self.n_components}, n={self.dim}, {kind})"

    # -- evaluation -------------------------------------------------------

    def _component_terms(self, x, gamma=1.0, nu2=0.0, want_score=False):
        """Per-component log terms (B, K) and, optionally, the score.

        ``gamma`` and ``nu2`` are scalars or (B,) arrays of kernel parameters.
        Returns ``(log_terms, score_or_None)``.
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {x.shape[-1]}")
        X = x.reshape(-1, self.dim)
        g = np.asarray(gamma, dtype=float)
        v = np.asarray(nu2, dtype=float)
        if g.ndim:
            g = g[:, None]
        if v.ndim:
            v = v[:, None]
        if self._eigvecs is None:
            return self._isotropic_terms(X, g, v, want_score)
        return self._full_terms(X, g, v, want_score)

    def _isotropic_terms(self, X, g, v, want_score):
        if self._shared_var:
            var = g**2 * self._eigvals[0, 0] + v  # scalar or (B, 1)
            var = np.broadcast_to(var, (X.shape[0], 1)) if np.ndim(var) else np.full((1, 1), var)
        else:
            var = g**2 * self._eigvals[:, 0][None] + v  # (B, K) or (1, K)
        if self.dim <= _EXACT_DIST_MAX_DIM:
            sq = np.zeros((X.shape[0], self.n_components))
            for d in range(self.dim):
                sq += np.square(X[:, d, None] - g * self.means[None, :, d])
        else:
            # ||x||^2 - 2 g x.mu + g^2 ||mu||^2; the score below does not use it
            sq = X @ self.means.T
            sq *= -2.0 * g
            sq += g**2 * self._mean_sq[None]
            sq += np.square(X).sum(axis=1)[:, None]
            np.maximum(sq, 0.0, out=sq)
        sq /= var
        sq += self.dim * (LOG_2PI + np.log(var))
        sq *= -0.5
        sq += self.log_weights[None]
        log_terms = sq
        if not want_score:
            return log_terms, None
        resp = _responsibilities(log_terms)
        resp /= var  # r_k / var_k
        # sum_k r_k (g mu_k - x) / var_k
        score = g * (resp @ self.means) - X * resp.sum(axis=1, keepdims=True)
        return log_terms, score

    def _full_terms(self, X, g, v, want_score):
        U = self._eigvecs
        centered = X[:, None, :] - g[..., None] * self.means[None]  # (B, K, n)
        z = np.matmul(centered.transpose(1, 0, 2), U).transpose(1, 0, 2)
        var = g[..., None] ** 2 * self._eigvals[None] + v[..., None]  # (B, K, n)
        w = z / var
        logdet = np.log(var).sum(axis=-1)
        maha = (z * w).sum(axis=-1)
        log_terms = self.log_weights[None] - 0.5 * (self.dim * LOG_2PI + logdet + maha)
        if not want_score:
            return log_terms, None
        comp = np.matmul(w.transpose(1, 0, 2), np.swapaxes(U, 1, 2)).transpose(1, 0, 2)
        resp = _responsibilities(log_terms)
        score = -np.matmul(resp[:, None, :], comp)[:, 0, :]
        return log_terms, score

    def log_density(self, x):
        """log p(x) for a point (n,) or batch (B, n)."""
        log_terms, _ = self._component_terms(x)
        out = _logsumexp(log_terms)
        return float(out[0]) if np.ndim(x) == 1 else out

    def score(self, x):
        """Gradient of log p at a point (n,) or batch (B, n)."""
        _, s = self._component_terms(x, want_score=True)
        return s[0] if np.ndim(x) == 1 else s

    # -- smoothing ------------------------------------------------------------

    def perturbed(self, gamma: float, nu: float) -> "GaussianMixture":
        """Mixture of gamma X + nu Z with X from this mixture and Z standard normal."""
        means = gamma * self.means
        eigvals = gamma**2 * self._eigvals + nu**2
        return GaussianMixture._from_parts(self.weights, means, self._eigvecs, eigvals)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """(size, n) draws."""
        comp = rng.choice(self.n_components, size=size, p=self.weights)
        z = rng.standard_normal((size, self.dim)) * np.sqrt(self._eigvals[comp])
        if self._eigvecs is not None:
            z = np.einsum("bij,bj->bi", self._eigvecs[comp], z)
        return self.means[comp] + z

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, block: dict) -> "GaussianMixture":
        if "variances" in block:
            return cls(block["weights"], block["means"], variances=block["variances"])
        return cls(block["weights"], block["means"], covariances=block["covariances"])


def _logsumexp(log_terms):
    m = log_terms.max(axis=1)
    return m + np.log(np.exp(log_terms - m[:, None]).sum(axis=1))


def _responsibilities(log_terms):
    r = log_terms - log_terms.max(axis=1, keepdims=True)
    np.exp(r, out=r)
    r /= r.sum(axis=1, keepdims=True)
    return r


def log_density(gmm: GaussianMixture, x):
    return gmm.log_density(x)


def score(gmm: GaussianMixture, x):
    return gmm.score(x)


def smooth(prior: GaussianMixture, sched: DiffusionSchedule, t: float) -> GaussianMixture:
    """Time-``t`` marginal of the forward diffusion started from ``prior``."""
    gamma, nu = kernel_params(sched, t)
    return prior.perturbed(gamma, nu)


class SmoothedPrior:
    """Energy -log p_t(x) and score of a mixture smoothed along a schedule.

    ``t`` may be a scalar or a (B,) array with one time per row of ``x``.
    Energies carry no normalisation constant beyond the mixture's own, so only
    differences at equal ``t`` are meaningful to callers.
    """

    def __init__(self, mixture: GaussianMixture, schedule: DiffusionSchedule):
        self.mixture = mixture
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def _kernel(self, t):
        gamma, nu = kernel_params(self.schedule, t)
        return gamma, np.square(nu)

    def energy(self, x, t):
        gamma, nu2 = self._kernel(t)
        log_terms, _ = self.mixture._component_terms(x, gamma, nu2)
        out = -_logsumexp(log_terms)
        return float(out[0]) if np.ndim(x) == 1 else out

    def score(self, x, t):
        gamma, nu2 = self._kernel(t)
        _, s = self.mixture._component_terms(x, gamma, nu2, want_score=True)
        return s[0] if np.ndim(x) == 1 else s

    def energy_and_score(self, x, t):
        gamma, nu2 = self._kernel(t)
        log_terms, s = self.mixture._component_terms(x, gamma, nu2, want_score=True)
        e = -_logsumexp(log_terms)
        if np.ndim(x) == 1:
            return float(e[0]), s[0]
        return e, s


def patch_offsets(size: int, patch: int, stride: int) -> np.ndarray:
    """Patch start positions along one axis; the last patch is flush with the edge."""
    if not 1 <= patch <= size or stride < 1:
        raise ValueError(f"invalid patch geometry: size {size}, patch {patch}, stride {stride}")
    offs = list(range(0, size - patch + 1, stride))
    if offs[-1] != size - patch:
        offs.append(size - patch)
    return np.array(offs)


def extract_patches(images, patch: int, stride: int) -> np.ndarray:
    """(B, H, W) images -> (B, P, patch * patch) with P patches per image in row-major order."""
    imgs = np.asarray(images, dtype=float)
    if imgs.ndim == 2:
        imgs = imgs[None]
    B, H, W = imgs.shape
    rows, cols = patch_offsets(H, patch, stride), patch_offsets(W, patch, stride)
    win = np.lib.stride_tricks.sliding_window_view(imgs, (patch, patch), axis=(1, 2))
    return win[:, rows][:, :, cols].reshape(B, len(rows) * len(cols), patch * patch)


class PatchPrior:
    """Regulariser sum_j -log p_t(P_j x) over overlapping square patches of an image.

    Every patch is scored by the same smoothed mixture on patch space, so the
    score is the sum of the patch scores scattered back to pixels.  ``x`` is a
    flattened (H * W,) image or a (B, H * W) batch.
    """

    def __init__(self, mixture: GaussianMixture, schedule: DiffusionSchedule, shape, patch: int, stride: int):
        self.mixture = mixture
        self.schedule = schedule
        self.shape = tuple(int(s) for s in shape)
        self.patch = int(patch)
        self.stride = int(stride)
        if mixture.dim != self.patch**2:
            raise ValueError(f"mixture dimension {mixture.dim} does not match {patch}x{patch} patches")
        self._rows = patch_offsets(self.shape[0], self.patch, self.stride)
        self._cols = patch_offsets(self.shape[1], self.patch, self.stride)
        cover = np.zeros(self.shape)
        for r in self._rows:
            for c in self._cols:
                cover[r:r + self.patch, c:c + self.patch] += 1
        self.max_overlap = int(cover.max())

    @property
    def dim(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_patches(self) -> int:
        return len(self._rows) * len(self._cols)

    def _kernel(self, t):
        gamma, nu = kernel_params(self.schedule, t)
        return gamma, np.square(nu)

    def _terms(self, x, t, want_score):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected images with {self.dim} pixels, got {x.shape[-1]}")
        X = x.reshape(-1, *self.shape)
        B, P = X.shape[0], self.n_patches
        patches = extract_patches(X, self.patch, self.stride).reshape(B * P, -1)
        gamma, nu2 = self._kernel(t)
        if np.ndim(gamma):
            gamma, nu2 = np.repeat(gamma, P), np.repeat(nu2, P)
        log_terms, s = self.mixture._component_terms(patches, gamma, nu2, want_score)
        energy = -_logsumexp(log_terms).reshape(B, P).sum(axis=1)
        if not want_score:
            return energy, None
        s = s.reshape(B, len(self._rows), len(self._cols), self.patch, self.patch)
        score = np.zeros_like(X)
        for a, r in enumerate(self._rows):
            for b, c in enumerate(self._cols):
                score[:, r:r + self.patch, c:c + self.patch] += s[:, a, b]
        return energy, score.reshape(B, -1)

    def energy(self, x, t):
        e, _ = self._terms(x, t, False)
        return float(e[0]) if np.ndim(x) == 1 else e

    def score(self, x, t):
        _, s = self._terms(x, t, True)
        return s[0] if np.ndim(x) == 1 else s

    def energy_and_score(self, x, t):
        e, s = self._terms(x, t, True)
        if np.ndim(x) == 1:
            return float(e[0]), s[0]
        return e, s


class ShiftedPrior:
    """Wrap a smoothed prior and add ``offset(t)`` to its energy; scores are untouched."""

    def __init__(self, base, offset):
        self.base = base
        self.offset = offset
        self.schedule = base.schedule

    @property
    def dim(self) -> int:
        return self.base.dim

    def energy(self, x, t):
        return self.base.energy(x, t) + self.offset(t)

    def score(self, x, t):
        return self.base.score(x, t)

    def energy_and_score(self, x, t):
        e, s = self.base.energy_and_score(x, t)
        return e + self.offset(t), s


def energy(prior, x, t):
    return prior.energy(x, t)


def empirical_prior(points, bandwidth: float) -> GaussianMixture:
    """Equal-weight isotropic mixture centred on ``points`` with std ``bandwidth``."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None] if points.size else points.reshape(0, 1)
    if points.shape[0] == 0:
        raise ValueError("empirical prior needs at least one point")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    m = points.shape[0]
    return GaussianMixture(np.full(m, 1.0 / m), points, variances=np.full(m, float(bandwidth) ** 2))


def load_points_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def toy_mixture(means=TOY_MEANS, cov_scale=TOY_COV_SCALE) -> GaussianMixture:
    means = np.asarray(means, dtype=float)
    K = means.shape[0]
    return GaussianMixture(np.full(K, 1.0 / K), means, covariances=np.repeat(cov_scale * np.eye(2)[None], K, axis=0))
