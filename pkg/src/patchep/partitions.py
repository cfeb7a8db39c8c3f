"""Shifted patch partitions of an image grid.

An image of ``width x height`` pixels is covered by non-overlapping square
patches of side ``patch_size``.  Shifting the tiling origin by one pixel in
each direction yields ``patch_size**2`` distinct partitions; shifted tilings
have truncated blocks along the image boundary.  Global vectors always stay
in row-major image order, blocks are realized through index lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Partition", "build_shifted_partitions", "gather", "scatter"]


def _axis_cells(length: int, patch_size: int, shift: int) -> list[tuple[int, int]]:
    """Cells (start, origin) along one axis; origin may be negative for the
    leading truncated cell so that local coordinates stay in [0, patch_size)."""
    cells = []
    if shift > 0:
        cells.append((0, shift - patch_size))
    start = shift
    while start < length:
        cells.append((start, start))
        start += patch_size
    return cells


@dataclass(frozen=True)
class Partition:
    """One non-overlapping tiling of the pixel grid.

    ``blocks[j]`` holds the row-major pixel indices of patch j, and
    ``local_indices[j]`` the corresponding positions inside the canonical
    ``patch_size x patch_size`` cell (row-major in [0, patch_size**2)).
    Interior blocks have exactly ``patch_size**2`` indices; boundary blocks
    of shifted partitions may have fewer.
    """

    width: int
    height: int
    patch_size: int
    shift: tuple[int, int]
    blocks: list[np.ndarray]
    local_indices: list[np.ndarray]
    # pixel -> (owning block, position within block); filled in __post_init__
    block_of: np.ndarray = field(repr=False, default=None)
    pos_of: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        n = self.width * self.height
        block_of = np.full(n, -1, dtype=np.int64)
        pos_of = np.full(n, -1, dtype=np.int64)
        for j, idx in enumerate(self.blocks):
            if np.any(block_of[idx] >= 0):
                raise ValueError("partition blocks overlap")
            block_of[idx] = j
            pos_of[idx] = np.arange(len(idx))
        if np.any(block_of < 0):
            raise ValueError("partition blocks do not cover the image")
        object.__setattr__(self, "block_of", block_of)
        object.__setattr__(self, "pos_of", pos_of)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    def block_sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.blocks])


def _build_partition(width: int, height: int, patch_size: int,
                     shift: tuple[int, int]) -> Partition:
    dx, dy = shift
    col_cells = _axis_cells(width, patch_size, dx)
    row_cells = _axis_cells(height, patch_size, dy)
    blocks = []
    locals_ = []
    for rstart, rorigin in row_cells:
        rows = np.arange(rstart, min(rorigin + patch_size, height))
        for cstart, corigin in col_cells:
            cols = np.arange(cstart, min(corigin + patch_size, width))
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            blocks.append((rr * width + cc).ravel())
            locals_.append(((rr - rorigin) * patch_size + (cc - corigin)).ravel())
    return Partition(width, height, patch_size, shift, blocks, locals_)


def build_shifted_partitions(width: int, height: int, patch_size: int) -> list[Partition]:
    """All ``patch_size**2`` one-pixel-shifted tilings of the grid.

    The (0, 0) shift tiles from the top-left corner; every other shift carries
    truncated blocks along the boundary.
    """
    if patch_size < 2:
        raise ValueError("patch_size must be >= 2")
    if width < patch_size or height < patch_size:
        raise ValueError("image dimensions must be >= patch_size")
    return [
        _build_partition(width, height, patch_size, (dx, dy))
        for dy in range(patch_size)
        for dx in range(patch_size)
    ]


def gather(vector: np.ndarray, partition: Partition, j: int) -> np.ndarray:
    """Extract the values of block j from a global (row-major) vector."""
    if not 0 <= j < partition.n_blocks:
        raise IndexError(f"block index {j} out of range")
    return np.asarray(vector)[partition.blocks[j]]


def scatter(values: np.ndarray, partition: Partition, j: int,
            vector: np.ndarray) -> np.ndarray:
    """Write block values into a copy of the global vector; other indices
    are left unchanged."""
    if not 0 <= j < partition.n_blocks:
        raise IndexError(f"block index {j} out of range")
    out = np.array(vector, copy=True)
    out[partition.blocks[j]] = values
    return out
