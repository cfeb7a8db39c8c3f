"""Gaussian mixture patch priors.

A :class:`PatchGMM` models vectorized square patches.  It is typically
trained on zero-mean, unit-scale patches; :class:`AdaptedGMM` rescales it to
the intensity range of a particular image through three shared parameters:
an intensity offset, the prior variance of the (marginalised) patch mean,
and a multiplicative scale.  The adapted component k has

    mean  = offset * 1 + scale * mu_k
    cov   = mean_var * 11^T + scale^2 * C_k

Sub-patch priors for truncated boundary blocks are obtained by marginalising
coordinates, which for a GMM is a plain restriction of means and covariances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

__all__ = [
    "PatchGMM",
    "Adaptation",
    "AdaptedGMM",
    "TiltedMoments",
    "adapt",
    "marginalize",
    "tilted_gmm_moments",
    "train_em",
    "save_gmm",
    "load_gmm",
]

GMM_MAGIC = b"PEPG"
GMM_VERSION = 1


def _jittered_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Cholesky with a single jitter retry of 1e-10 * trace/dim on failure."""
    matrix = 0.5 * (matrix + np.swapaxes(matrix, -1, -2))
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        dim = matrix.shape[-1]
        jitter = 1e-10 * np.trace(matrix, axis1=-2, axis2=-1) / dim
        eye = np.eye(dim)
        return np.linalg.cholesky(matrix + jitter[..., None, None] * eye)


@dataclass
class PatchGMM:
    """K-component Gaussian mixture over flattened patches of dimension dim."""

    weights: np.ndarray  # (K,)
    means: np.ndarray    # (K, dim)
    covs: np.ndarray     # (K, dim, dim)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        k, dim = self.means.shape
        if self.weights.shape != (k,) or self.covs.shape != (k, dim, dim):
            raise ValueError("inconsistent GMM shapes")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to one")
        try:
            _jittered_cholesky(self.covs)
        except np.linalg.LinAlgError as exc:
            raise ValueError("component covariance is not positive definite") from exc

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log mixture density of rows of x, shape (n,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        chols = _jittered_cholesky(self.covs)
        parts = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            parts[:, k] = np.log(self.weights[k]) + _mvn_logpdf_chol(x, self.means[k], chols[k])
        return logsumexp(parts, axis=1)


def _mvn_logpdf_chol(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    diff = x - mean
    z = solve_triangular(chol, diff.T, lower=True)
    quad = np.sum(z ** 2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (mean.size * np.log(2 * np.pi) + logdet + quad)


@dataclass(frozen=True)
class Adaptation:
    """Intensity adaptation of a normalized patch GMM."""

    offset: float = 0.0     # additive intensity offset of every patch
    mean_var: float = 0.0   # prior variance of the shared patch mean, >= 0
    scale: float = 1.0      # multiplicative intensity scale, > 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.mean_var < 0:
            raise ValueError("mean_var must be nonnegative")


@dataclass
class AdaptedGMM:
    """A patch GMM with the intensity adaptation materialized."""

    base: PatchGMM
    theta: Adaptation
    means: np.ndarray = field(init=False)
    covs: np.ndarray = field(init=False)
    _marginal_cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        t = self.theta
        dim = self.base.dim
        self.means = t.offset + t.scale * self.base.means
        ones = np.ones((dim, dim))
        self.covs = t.mean_var * ones + t.scale ** 2 * self.base.covs

    @property
    def weights(self) -> np.ndarray:
        return self.base.weights

    @property
    def n_components(self) -> int:
        return self.base.n_components

    @property
    def dim(self) -> int:
        return self.base.dim

    def marginal(self, indices) -> "AdaptedGMM":
        """Cached marginalization onto a coordinate subset."""
        key = tuple(int(i) for i in indices)
        if key not in self._marginal_cache:
            self._marginal_cache[key] = marginalize(self, np.asarray(key))
        return self._marginal_cache[key]


def adapt(base: PatchGMM, theta: Adaptation) -> AdaptedGMM:
    return AdaptedGMM(base=base, theta=theta)


def marginalize(adapted: AdaptedGMM, indices: np.ndarray) -> AdaptedGMM:
    """Restrict the prior to a sub-patch: weights unchanged, means and
    covariances restricted to the kept coordinates."""
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        raise ValueError("cannot marginalize onto an empty index set")
    if np.any(indices < 0) or np.any(indices >= adapted.dim):
        raise IndexError("marginalization indices out of range")
    sub_base = PatchGMM(
        weights=adapted.base.weights.copy(),
        means=adapted.base.means[:, indices],
        covs=adapted.base.covs[:, indices[:, None], indices[None, :]],
    )
    return AdaptedGMM(base=sub_base, theta=adapted.theta)


@dataclass
class TiltedMoments:
    """Moments of (GMM prior) x (Gaussian cavity) for one block."""

    weights: np.ndarray     # (K,) posterior component weights, sum to 1
    comp_means: np.ndarray  # (K, b)
    comp_covs: np.ndarray   # (K, b, b)
    mean: np.ndarray        # (b,)
    cov: np.ndarray         # (b, b)


def _tilted_moments_stack(adapted: AdaptedGMM, cavity_means: np.ndarray,
                          cavity_covs: np.ndarray):
    """Vectorized tilted-GMM moments for a stack of blocks sharing the prior.

    cavity_means: (J, b); cavity_covs: (J, b, b).  Returns
    (weights (J, K), comp_means (J, K, b), comp_covs (J, K, b, b),
    means (J, b), covs (J, b, b)).  Weights are computed in the log domain
    with per-block max subtraction.
    """
    m = np.asarray(cavity_means, dtype=float)
    s = np.asarray(cavity_covs, dtype=float)
    n_blocks, b = m.shape
    k = adapted.n_components

    mu = adapted.means            # (K, b)
    cc = adapted.covs             # (K, b, b)
    total = s[:, None, :, :] + cc[None, :, :, :]          # (J, K, b, b)
    chol = _jittered_cholesky(total)
    diff = m[:, None, :] - mu[None, :, :]                 # (J, K, b)
    sol = np.linalg.solve(total, diff[..., None])[..., 0]
    quad = np.sum(diff * sol, axis=-1)                    # (J, K)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    log_w = np.log(adapted.weights)[None, :] - 0.5 * (b * np.log(2 * np.pi) + logdet + quad)
    log_w = log_w - np.max(log_w, axis=1, keepdims=True)
    weights = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))

    # gain G = C (C + S)^{-1}; posterior mean mu + G (m - mu), cov C - G C
    gain = np.swapaxes(np.linalg.solve(total, cc[None, :, :, :]), -1, -2)
    comp_means = mu[None, :, :] + (gain @ diff[..., None])[..., 0]
    comp_covs = cc[None, :, :, :] - gain @ cc[None, :, :, :]
    comp_covs = 0.5 * (comp_covs + np.swapaxes(comp_covs, -1, -2))

    means = np.sum(weights[..., None] * comp_means, axis=1)
    outer = comp_means[..., :, None] * comp_means[..., None, :]
    covs = np.sum(weights[..., None, None] * (outer + comp_covs), axis=1)
    covs = covs - means[..., :, None] * means[..., None, :]
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return weights, comp_means, comp_covs, means, covs


def tilted_gmm_moments(adapted: AdaptedGMM, cavity_mean: np.ndarray,
                       cavity_cov: np.ndarray) -> TiltedMoments:
    """Posterior weights and first two moments of the tilted distribution
    (prior GMM times one Gaussian cavity block)."""
    cavity_mean = np.asarray(cavity_mean, dtype=float)
    cavity_cov = np.asarray(cavity_cov, dtype=float)
    if cavity_mean.shape != (adapted.dim,):
        raise ValueError("cavity mean dimension does not match the prior")
    _jittered_cholesky(cavity_cov)  # raises if the cavity block is not SPD
    w, cm, cv, mean, cov = _tilted_moments_stack(
        adapted, cavity_mean[None, :], cavity_cov[None, :, :])
    return TiltedMoments(weights=w[0], comp_means=cm[0], comp_covs=cv[0],
                         mean=mean[0], cov=cov[0])


def train_em(samples: np.ndarray, n_components: int, max_iters: int = 100,
             seed: int = 0, cov_floor: float | None = None,
             return_history: bool = False):
    """Fit a PatchGMM by expectation-maximization.

    The log-likelihood is non-decreasing across iterations; a regularization
    floor keeps every covariance diagonal bounded away from zero.  Degenerate
    (constant) data collapses to a single floored component.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dim = samples.shape
    if n_components <= 0:
        raise ValueError("n_components must be positive")
    if n < n_components:
        raise ValueError("need at least one sample per component")

    spread = float(np.mean(np.var(samples, axis=0)))
    if cov_floor is None:
        cov_floor = max(1e-6 * spread, 1e-10)
    eye = np.eye(dim)

    if spread == 0.0:  # constant data: EM is degenerate
        gmm = PatchGMM(weights=np.ones(1), means=samples[:1].copy(),
                       covs=cov_floor * eye[None])
        return (gmm, []) if return_history else gmm

    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_components, replace=False)
    means = samples[idx].copy()
    base_cov = np.cov(samples.T).reshape(dim, dim) + cov_floor * eye
    covs = np.repeat(base_cov[None], n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)
    gmm = PatchGMM(weights=weights, means=means, covs=covs)

    history = []
    for _ in range(max_iters):
        chols = _jittered_cholesky(gmm.covs)
        log_resp = np.empty((n, n_components))
        for k in range(n_components):
            log_resp[:, k] = np.log(gmm.weights[k]) + _mvn_logpdf_chol(samples, gmm.means[k], chols[k])
        log_norm = logsumexp(log_resp, axis=1)
        history.append(float(np.sum(log_norm)))
        resp = np.exp(log_resp - log_norm[:, None])

        counts = resp.sum(axis=0) + 1e-300
        weights = counts / n
        means = (resp.T @ samples) / counts[:, None]
        covs = np.empty_like(gmm.covs)
        for k in range(n_components):
            centered = samples - means[k]
            covs[k] = (centered.T * resp[:, k]) @ centered / counts[k] + cov_floor * eye
        weights = weights / weights.sum()
        gmm = PatchGMM(weights=weights, means=means, covs=covs)

    return (gmm, history) if return_history else gmm


def save_gmm(path, gmm: PatchGMM) -> None:
    with open(path, "wb") as fh:
        fh.write(GMM_MAGIC)
        fh.write(struct.pack("<III", GMM_VERSION, gmm.n_components, gmm.dim))
        for k in range(gmm.n_components):
            fh.write(struct.pack("<d", gmm.weights[k]))
            fh.write(gmm.means[k].astype("<f8").tobytes())
            fh.write(gmm.covs[k].astype("<f8").tobytes())


def load_gmm(path) -> PatchGMM:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GMM_MAGIC:
            raise ValueError(f"bad GMM file magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise ValueError("truncated GMM header")
        version, k, dim = struct.unpack("<III", header)
        if version != GMM_VERSION:
            raise ValueError(f"unsupported GMM file version {version}")
        payload = fh.read()
    per_comp = 8 * (1 + dim + dim * dim)
    if len(payload) != k * per_comp:
        raise ValueError("truncated GMM component data")
    weights = np.empty(k)
    means = np.empty((k, dim))
    covs = np.empty((k, dim, dim))
    for i in range(k):
        chunk = payload[i * per_comp:(i + 1) * per_comp]
        weights[i] = struct.unpack("<d", chunk[:8])[0]
        means[i] = np.frombuffer(chunk[8:8 + 8 * dim], dtype="<f8")
        covs[i] = np.frombuffer(chunk[8 + 8 * dim:], dtype="<f8").reshape(dim, dim)
    return PatchGMM(weights=weights, means=means, covs=covs)
