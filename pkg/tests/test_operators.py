import numpy as np
import pytest

from patchep.gaussians import BlockDiagonalCov, DiagonalCov, IsotropicCov
from patchep.operators import (
    Conv2D,
    GaussianNoise,
    Identity,
    Mask,
    PoissonNoise,
    all_row_quadratic_forms,
    row_dot,
    row_quadratic_form,
    simulate,
)
from patchep.partitions import build_shifted_partitions

from conftest import random_spd


def dense_matrix(op):
    """Column-by-column materialization through apply (oracle helper)."""
    n = op.n_pixels
    h = np.empty((n, n))
    eye = np.eye(n)
    for m in range(n):
        h[:, m] = op.apply(eye[m])
    return h


class TestApplyAdjoint:
    def test_identity_apply(self):
        op = Identity(4, 3)
        x = np.arange(12.0)
        np.testing.assert_array_equal(op.apply(x), x)
        np.testing.assert_array_equal(op.apply_adjoint(x), x)

    def test_mask_all_ones_is_identity(self):
        op = Mask(4, 3, np.ones(12, bool))
        x = np.arange(12.0)
        np.testing.assert_array_equal(op.apply(x), x)

    def test_conv_1x1_unit_kernel_is_identity(self):
        op = Conv2D(5, 4, np.array([[1.0]]))
        x = np.random.default_rng(0).standard_normal(20)
        np.testing.assert_allclose(op.apply(x), x)
        np.testing.assert_allclose(op.apply_adjoint(x), x)

    def test_adjoint_identity_all_variants(self):
        rng = np.random.default_rng(42)
        kept = rng.random(30) < 0.6
        ops = [
            Identity(6, 5),
            Mask(6, 5, kept),
            Conv2D(6, 5, rng.standard_normal((3, 3))),
            Conv2D(6, 5, rng.standard_normal((5, 5))),
        ]
        for op in ops:
            for _ in range(5):
                x = rng.standard_normal(30)
                v = rng.standard_normal(30)
                lhs = np.dot(op.apply(x), v)
                rhs = np.dot(x, op.apply_adjoint(v))
                assert abs(lhs - rhs) < 1e-10

    def test_conv_matches_dense_rows_and_columns(self):
        rng = np.random.default_rng(1)
        op = Conv2D(6, 6, rng.standard_normal((3, 3)))
        h = dense_matrix(op)
        for n in [0, 5, 17, 35]:
            ms, ws = op.row(n)
            dense_row = np.zeros(36)
            np.add.at(dense_row, ms, ws)
            np.testing.assert_allclose(dense_row, h[n], atol=1e-14)
            ns, ws = op.column(n)
            dense_col = np.zeros(36)
            np.add.at(dense_col, ns, ws)
            np.testing.assert_allclose(dense_col, h[:, n], atol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            Identity(4, 4).apply(np.zeros(15))


class TestRowForms:
    def test_identity_diagonal(self):
        op = Identity(3, 1)
        v = DiagonalCov(np.array([1.0, 4.0, 9.0]))
        assert row_quadratic_form(op, 1, v) == 4.0

    def test_masked_row_is_zero(self):
        op = Mask(3, 1, np.array([True, False, True]))
        v = DiagonalCov(np.ones(3))
        assert row_quadratic_form(op, 1, v) == 0.0

    def test_conv_vs_dense_oracle(self):
        # 3x3 uniform kernel on a 6x6 image against the dense H matrix
        op = Conv2D(6, 6, np.full((3, 3), 1.0 / 9.0))
        h = dense_matrix(op)
        rng = np.random.default_rng(3)
        part = build_shifted_partitions(6, 6, 3)[4]
        blocks = [random_spd(rng, len(b)) for b in part.blocks]
        cov = BlockDiagonalCov(part, blocks)
        sigma = np.zeros((36, 36))
        for j, idx in enumerate(part.blocks):
            sigma[np.ix_(idx, idx)] = blocks[j]
        m = rng.standard_normal(36)
        for n in range(36):
            expected_q = h[n] @ sigma @ h[n]
            assert abs(row_quadratic_form(op, n, cov) - expected_q) < 1e-12
            assert abs(row_dot(op, n, m) - h[n] @ m) < 1e-12
        batch = all_row_quadratic_forms(op, cov)
        np.testing.assert_allclose(batch, [h[n] @ sigma @ h[n] for n in range(36)],
                                   rtol=1e-12, atol=1e-12)

    def test_all_row_forms_isotropic_and_diagonal(self):
        rng = np.random.default_rng(8)
        op = Conv2D(5, 5, rng.standard_normal((3, 3)))
        h = dense_matrix(op)
        diag = DiagonalCov(rng.uniform(0.5, 2.0, 25))
        np.testing.assert_allclose(
            all_row_quadratic_forms(op, diag),
            [h[n] @ np.diag(diag.variances) @ h[n] for n in range(25)], rtol=1e-12)
        iso = IsotropicCov(1.7, 25)
        np.testing.assert_allclose(
            all_row_quadratic_forms(op, iso),
            [1.7 * h[n] @ h[n] for n in range(25)], rtol=1e-12)

    def test_gram_block_matches_dense(self):
        rng = np.random.default_rng(5)
        op = Conv2D(6, 6, rng.standard_normal((3, 3)))
        h = dense_matrix(op)
        w = rng.uniform(0.5, 2.0, 36)
        idx = np.array([0, 1, 7, 8, 20])
        expected = (h.T @ np.diag(w) @ h)[np.ix_(idx, idx)]
        np.testing.assert_allclose(op.gram_block(idx, w), expected, atol=1e-12)
        expected_unweighted = (h.T @ h)[np.ix_(idx, idx)]
        np.testing.assert_allclose(op.gram_block(idx), expected_unweighted, atol=1e-12)

    def test_diag_gram(self):
        rng = np.random.default_rng(6)
        op = Conv2D(5, 5, rng.standard_normal((3, 3)))
        h = dense_matrix(op)
        np.testing.assert_allclose(op.diag_gram(), np.diag(h.T @ h), rtol=1e-12)
        kept = rng.random(25) < 0.5
        np.testing.assert_array_equal(Mask(5, 5, kept).diag_gram(), kept.astype(float))

    def test_row_index_out_of_range(self):
        with pytest.raises(IndexError):
            Identity(2, 2).row(4)


class TestSimulate:
    def test_tiny_gaussian_noise_reproduces_input(self):
        x = np.linspace(0, 1, 16)
        y = simulate(Identity(4, 4), x, GaussianNoise(1e-18), seed=0)
        np.testing.assert_allclose(y, x, atol=1e-8)

    def test_poisson_zero_rate_gives_zero(self):
        y = simulate(Identity(4, 4), np.zeros(16), PoissonNoise(), seed=1)
        np.testing.assert_array_equal(y, np.zeros(16))

    def test_poisson_negative_rate_rejected(self):
        with pytest.raises(ValueError):
            simulate(Identity(2, 2), np.array([1.0, -0.5, 0.0, 2.0]), PoissonNoise(), seed=0)

    def test_poisson_law_of_large_numbers(self):
        # constant rate 30 over 10^4 pixels: sample mean within 3 sigma
        n = 10_000
        x = np.full(n, 30.0)
        y = simulate(Identity(100, 100), x, PoissonNoise(), seed=7)
        se = np.sqrt(30.0 / n)
        assert abs(y.mean() - 30.0) < 3 * se

    def test_deterministic_given_seed(self):
        x = np.linspace(0, 5, 25)
        a = simulate(Conv2D(5, 5, np.full((3, 3), 1 / 9)), x, GaussianNoise(0.1), seed=11)
        b = simulate(Conv2D(5, 5, np.full((3, 3), 1 / 9)), x, GaussianNoise(0.1), seed=11)
        np.testing.assert_array_equal(a, b)
