import numpy as np
import pytest

from patchep.partitions import build_shifted_partitions, gather, scatter


class TestBuildShiftedPartitions:
    def test_exact_tiling_single_block(self):
        parts = build_shifted_partitions(8, 8, 8)
        p0 = parts[0]
        assert p0.shift == (0, 0)
        assert p0.n_blocks == 1
        assert len(p0.blocks[0]) == 64
        np.testing.assert_array_equal(np.sort(p0.blocks[0]), np.arange(64))

    def test_partition_count_equals_patch_dim(self):
        # one partition per one-pixel shift in both directions
        parts = build_shifted_partitions(8, 8, 8)
        assert len(parts) == 64
        shifts = {p.shift for p in parts}
        assert shifts == {(dx, dy) for dx in range(8) for dy in range(8)}

    def test_truncated_blocks_9x9(self):
        # 9x9, patch 8, shift (0,0): cells [0,8)+[8,9) per axis -> 64, 8, 8, 1
        parts = build_shifted_partitions(9, 9, 8)
        sizes = sorted(len(b) for b in parts[0].blocks)
        assert sizes == [1, 8, 8, 64]

    def test_rejects_small_images(self):
        with pytest.raises(ValueError):
            build_shifted_partitions(4, 8, 8)
        with pytest.raises(ValueError):
            build_shifted_partitions(8, 8, 1)

    def test_blocks_disjoint_and_cover(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            w = int(rng.integers(4, 13))
            h = int(rng.integers(4, 13))
            p = int(rng.integers(2, min(w, h) + 1))
            for part in build_shifted_partitions(w, h, p):
                seen = np.concatenate(part.blocks)
                assert seen.size == w * h
                np.testing.assert_array_equal(np.sort(seen), np.arange(w * h))

    def test_interior_blocks_full_and_local_indices_consistent(self):
        for part in build_shifted_partitions(10, 10, 3):
            for idx, loc in zip(part.blocks, part.local_indices):
                assert len(idx) == len(loc)
                assert np.all(loc >= 0) and np.all(loc < 9)
                assert len(np.unique(loc)) == len(loc)
            full = [b for b in part.blocks if len(b) == 9]
            assert len(full) >= 1

    def test_shifted_partition_local_indices_match_cell_position(self):
        # shift (2,0) on width 8: leading cell [0,2) holds the last 2 columns
        # of a conceptual patch starting at column -1 (origin 2-4=-2 for p=4)
        parts = build_shifted_partitions(8, 8, 4)
        part = next(p for p in parts if p.shift == (2, 0))
        lead = next(
            (b, l) for b, l in zip(part.blocks, part.local_indices)
            if np.all(b % 8 < 2) and np.all(b // 8 < 4)
        )
        cols_local = lead[1] % 4
        assert set(cols_local.tolist()) == {2, 3}


class TestGatherScatter:
    def test_gather_zero_vector(self):
        part = build_shifted_partitions(6, 6, 3)[0]
        assert np.all(gather(np.zeros(36), part, 2) == 0)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(3)
        for part in build_shifted_partitions(7, 5, 2)[:4]:
            v = rng.standard_normal(35)
            for j in range(part.n_blocks):
                out = scatter(gather(v, part, j), part, j, v)
                np.testing.assert_array_equal(out, v)

    def test_gather_single_block_is_identity_order(self):
        part = build_shifted_partitions(8, 8, 8)[0]
        v = np.arange(64.0)
        np.testing.assert_array_equal(gather(v, part, 0), v)

    def test_scatter_leaves_other_indices(self):
        part = build_shifted_partitions(6, 6, 3)[0]
        v = np.zeros(36)
        out = scatter(np.ones(9), part, 1, v)
        assert out[part.blocks[1]].sum() == 9
        mask = np.ones(36, bool)
        mask[part.blocks[1]] = False
        assert np.all(out[mask] == 0)
        assert np.all(v == 0)  # input untouched

    def test_index_out_of_range(self):
        part = build_shifted_partitions(6, 6, 3)[0]
        with pytest.raises(IndexError):
            gather(np.zeros(36), part, part.n_blocks)
        with pytest.raises(IndexError):
            scatter(np.zeros(9), part, -1, np.zeros(36))
