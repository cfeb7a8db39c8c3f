"""Gaussian vectors with structured covariance matrices.

The covariance of every approximating factor is one of three structures:
diagonal, block-diagonal (aligned to a :class:`~patchep.partitions.Partition`),
or isotropic.  Validity (positive variances, positive-definite blocks) is
checked at construction time; positive definiteness is established by
attempting a Cholesky factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .partitions import Partition

__all__ = [
    "DiagonalCov",
    "BlockDiagonalCov",
    "IsotropicCov",
    "StructuredGaussian",
    "marginal_variances",
]


def is_spd(matrix: np.ndarray) -> bool:
    """True iff the matrix is symmetric positive definite (Cholesky succeeds)."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    if not np.allclose(matrix, matrix.T, rtol=1e-10, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(matrix)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class DiagonalCov:
    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("diagonal covariance requires finite positive variances")
        object.__setattr__(self, "variances", v)

    @property
    def size(self) -> int:
        return self.variances.size


@dataclass(frozen=True)
class IsotropicCov:
    variance: float
    size: int

    def __post_init__(self):
        if not np.isfinite(self.variance) or self.variance <= 0:
            raise ValueError("isotropic covariance requires a finite positive variance")


@dataclass(frozen=True)
class BlockDiagonalCov:
    """Per-patch symmetric positive-definite blocks aligned to a partition."""

    partition: Partition
    blocks: list

    def __post_init__(self):
        if len(self.blocks) != self.partition.n_blocks:
            raise ValueError("one covariance block per partition block required")
        checked = []
        for j, block in enumerate(self.blocks):
            block = np.asarray(block, dtype=float)
            if block.shape != (len(self.partition.blocks[j]),) * 2:
                raise ValueError(f"block {j} shape does not match the partition")
            if not is_spd(block):
                raise ValueError(f"covariance block {j} is not symmetric positive definite")
            checked.append(block)
        object.__setattr__(self, "blocks", checked)

    @property
    def size(self) -> int:
        return self.partition.n_pixels


Covariance = DiagonalCov | BlockDiagonalCov | IsotropicCov


@dataclass(frozen=True)
class StructuredGaussian:
    mean: np.ndarray
    cov: Covariance

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 1 or not np.all(np.isfinite(mean)):
            raise ValueError("mean must be a finite vector")
        if mean.size != self.cov.size:
            raise ValueError("mean and covariance dimensions differ")
        object.__setattr__(self, "mean", mean)

    @property
    def size(self) -> int:
        return self.mean.size

    def marginal_variances(self) -> np.ndarray:
        return marginal_variances(self.cov)


def marginal_variances(cov: Covariance) -> np.ndarray:
    """Per-pixel marginal variances of a structured covariance, in global
    row-major pixel order."""
    if isinstance(cov, DiagonalCov):
        return cov.variances.copy()
    if isinstance(cov, IsotropicCov):
        return np.full(cov.size, cov.variance)
    if isinstance(cov, BlockDiagonalCov):
        out = np.empty(cov.partition.n_pixels)
        for j, block in enumerate(cov.blocks):
            out[cov.partition.blocks[j]] = np.diag(block)
        return out
    raise TypeError(f"unknown covariance structure: {type(cov)!r}")
