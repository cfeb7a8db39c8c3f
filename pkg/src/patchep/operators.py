"""Matrix-free degradation operators and noise simulators.

The linear degradation ``H`` is one of: identity (denoising), a 0/1 pixel
mask (inpainting), or circular 2D convolution (deconvolution).  Operators
expose forward/adjoint application plus sparse row access, so that the
quadratic forms ``h_n S h_n^T`` touch only the kernel's nonzeros and the
covariance blocks they intersect.

Noise simulation uses a counter-based (Philox) generator so runs are
reproducible regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import BlockDiagonalCov, Covariance, DiagonalCov, IsotropicCov, marginal_variances

__all__ = [
    "Identity",
    "Mask",
    "Conv2D",
    "GaussianNoise",
    "PoissonNoise",
    "simulate",
    "row_quadratic_form",
    "row_dot",
    "all_row_quadratic_forms",
]


class DegradationOperator:
    """Common interface: ``apply``, ``apply_adjoint``, sparse ``row``, and
    a dense ``gram_block`` of ``H^T W H`` restricted to a pixel subset."""

    width: int
    height: int

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def is_diagonal(self) -> bool:
        raise NotImplementedError

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_adjoint(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def row(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero (indices, weights) of row n of H."""
        raise NotImplementedError

    def column(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero (indices, weights) of column m of H."""
        raise NotImplementedError

    def diag_gram(self) -> np.ndarray:
        """Diagonal of H^T H."""
        raise NotImplementedError

    def _check_len(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_pixels,):
            raise ValueError(f"expected a length-{self.n_pixels} vector")
        return x

    def gram_block(self, indices: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """Dense (H^T W H)[indices, indices] with diagonal W (default identity)."""
        indices = np.asarray(indices)
        cols = [self.column(int(m)) for m in indices]
        rows_union = np.unique(np.concatenate([c[0] for c in cols]))
        lookup = {int(n): i for i, n in enumerate(rows_union)}
        a = np.zeros((rows_union.size, indices.size))
        for jcol, (ns, ws) in enumerate(cols):
            for n, w in zip(ns, ws):
                a[lookup[int(n)], jcol] += w
        w_diag = np.ones(rows_union.size) if weights is None else np.asarray(weights, dtype=float)[rows_union]
        return a.T @ (w_diag[:, None] * a)


@dataclass
class Identity(DegradationOperator):
    width: int
    height: int

    @property
    def is_diagonal(self) -> bool:
        return True

    def apply(self, x):
        return self._check_len(x).copy()

    def apply_adjoint(self, v):
        return self._check_len(v).copy()

    def row(self, n):
        if not 0 <= n < self.n_pixels:
            raise IndexError("row index out of range")
        return np.array([n]), np.array([1.0])

    column = row

    def diag_gram(self):
        return np.ones(self.n_pixels)


@dataclass
class Mask(DegradationOperator):
    """Diagonal 0/1 operator; ``kept[n]`` is True where pixel n is observed."""

    width: int
    height: int
    kept: np.ndarray

    def __post_init__(self):
        kept = np.asarray(self.kept)
        if kept.shape != (self.n_pixels,):
            raise ValueError("kept must have one entry per pixel")
        self.kept = kept.astype(bool)

    @property
    def is_diagonal(self) -> bool:
        return True

    def apply(self, x):
        return self._check_len(x) * self.kept

    apply_adjoint = apply

    def row(self, n):
        if not 0 <= n < self.n_pixels:
            raise IndexError("row index out of range")
        if self.kept[n]:
            return np.array([n]), np.array([1.0])
        return np.array([], dtype=int), np.array([])

    column = row

    def diag_gram(self):
        return self.kept.astype(float)


@dataclass
class Conv2D(DegradationOperator):
    """Circular 2D convolution with a centered k x k kernel.

    (Hx)[i, j] = sum_{a,b} kernel[a, b] * x[(i - a + c) % height, (j - b + c) % width]
    with c = k // 2.  Circular boundaries keep H diagonalizable by the DFT.
    """

    width: int
    height: int
    kernel: np.ndarray

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        k = kernel.shape[0]
        if kernel.ndim != 2 or kernel.shape != (k, k):
            raise ValueError("kernel must be square")
        if not np.all(np.isfinite(kernel)):
            raise ValueError("kernel entries must be finite")
        if k > min(self.width, self.height):
            raise ValueError("kernel larger than the image")
        self.kernel = kernel
        self._center = k // 2
        # offsets (da, db) = (a - c, b - c) paired with kernel weights
        aa, bb = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        self._offsets = np.stack([aa.ravel() - self._center, bb.ravel() - self._center], axis=1)
        self._weights = kernel.ravel()

    @property
    def is_diagonal(self) -> bool:
        return False

    def apply(self, x):
        x2 = self._check_len(x).reshape(self.height, self.width)
        out = np.zeros_like(x2)
        for (da, db), w in zip(self._offsets, self._weights):
            if w != 0.0:
                out += w * np.roll(x2, (da, db), axis=(0, 1))
        return out.ravel()

    def apply_adjoint(self, v):
        v2 = self._check_len(v).reshape(self.height, self.width)
        out = np.zeros_like(v2)
        for (da, db), w in zip(self._offsets, self._weights):
            if w != 0.0:
                out += w * np.roll(v2, (-da, -db), axis=(0, 1))
        return out.ravel()

    def _shifted_indices(self, n: int, sign: int) -> np.ndarray:
        i, j = divmod(n, self.width)
        rows = (i + sign * self._offsets[:, 0]) % self.height
        cols = (j + sign * self._offsets[:, 1]) % self.width
        return rows * self.width + cols

    def row(self, n):
        if not 0 <= n < self.n_pixels:
            raise IndexError("row index out of range")
        return self._shifted_indices(n, -1), self._weights.copy()

    def column(self, m):
        if not 0 <= m < self.n_pixels:
            raise IndexError("column index out of range")
        return self._shifted_indices(m, +1), self._weights.copy()

    def diag_gram(self):
        return np.full(self.n_pixels, float(np.sum(self.kernel ** 2)))


@dataclass(frozen=True)
class GaussianNoise:
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("noise variance must be positive")


@dataclass(frozen=True)
class PoissonNoise:
    pass


def simulate(operator: DegradationOperator, x: np.ndarray, noise, seed: int) -> np.ndarray:
    """Draw one observation y from the degradation model."""
    rng = np.random.Generator(np.random.Philox(seed))
    hx = operator.apply(x)
    if isinstance(noise, GaussianNoise):
        return hx + np.sqrt(noise.variance) * rng.standard_normal(hx.size)
    if isinstance(noise, PoissonNoise):
        if np.any(hx < 0):
            raise ValueError("Poisson noise requires nonnegative rates (Hx >= 0)")
        return rng.poisson(hx).astype(float)
    raise TypeError(f"unknown noise model: {noise!r}")


def row_dot(operator: DegradationOperator, n: int, vector: np.ndarray) -> float:
    """h_n . vector using only the row's nonzeros."""
    ms, ws = operator.row(n)
    return float(np.dot(ws, np.asarray(vector)[ms]))


def row_quadratic_form(operator: DegradationOperator, n: int, cov: Covariance) -> float:
    """h_n S h_n^T for a structured covariance S."""
    ms, ws = operator.row(n)
    if ms.size == 0:
        return 0.0
    if isinstance(cov, DiagonalCov):
        return float(np.sum(ws ** 2 * cov.variances[ms]))
    if isinstance(cov, IsotropicCov):
        return float(cov.variance * np.sum(ws ** 2))
    if isinstance(cov, BlockDiagonalCov):
        part = cov.partition
        blocks = part.block_of[ms]
        pos = part.pos_of[ms]
        total = 0.0
        for j in np.unique(blocks):
            sel = blocks == j
            sub = cov.blocks[j][np.ix_(pos[sel], pos[sel])]
            w = ws[sel]
            total += float(w @ sub @ w)
        return total
    raise TypeError(f"unknown covariance structure: {type(cov)!r}")


def all_row_quadratic_forms(operator: DegradationOperator, cov: Covariance) -> np.ndarray:
    """Vector of h_n S h_n^T for every row n (vectorized over pixels)."""
    n_pix = operator.n_pixels
    if isinstance(operator, Identity):
        return marginal_variances(cov)
    if isinstance(operator, Mask):
        return operator.kept * marginal_variances(cov)
    if not isinstance(operator, Conv2D):
        return np.array([row_quadratic_form(operator, n, cov) for n in range(n_pix)])

    offsets = operator._offsets
    weights = operator._weights
    # m(n, o): pixel hit by kernel offset o in row n, for all n at once
    idx = np.empty((offsets.shape[0], n_pix), dtype=np.int64)
    base = np.arange(n_pix)
    ii, jj = divmod(base, operator.width)
    for t, (da, db) in enumerate(offsets):
        idx[t] = ((ii - da) % operator.height) * operator.width + (jj - db) % operator.width

    if isinstance(cov, (DiagonalCov, IsotropicCov)):
        v = marginal_variances(cov)
        out = np.zeros(n_pix)
        for t, w in enumerate(weights):
            out += w * w * v[idx[t]]
        return out
    if isinstance(cov, BlockDiagonalCov):
        part = cov.partition
        rmax = max(len(b) for b in part.blocks)
        padded = np.zeros((part.n_blocks, rmax, rmax))
        for j, block in enumerate(cov.blocks):
            padded[j, : block.shape[0], : block.shape[1]] = block
        out = np.zeros(n_pix)
        for t1, w1 in enumerate(weights):
            if w1 == 0.0:
                continue
            b1 = part.block_of[idx[t1]]
            p1 = part.pos_of[idx[t1]]
            for t2, w2 in enumerate(weights):
                if w2 == 0.0:
                    continue
                same = b1 == part.block_of[idx[t2]]
                vals = padded[b1, p1, part.pos_of[idx[t2]]]
                out += (w1 * w2) * np.where(same, vals, 0.0)
        return out
    raise TypeError(f"unknown covariance structure: {type(cov)!r}")
