import numpy as np
import pytest

from patchep.imageio import read_float_raster, read_pgm
from patchep.metrics import CoverageReport, coverage, coverage_curve, psnr, write_uncertainty_maps


class TestPsnr:
    def test_exact_estimate_is_infinite(self):
        x = np.linspace(0.1, 1.0, 20)
        assert psnr(x, x.copy()) == np.inf

    def test_formula_unit_peak(self):
        x = np.ones(100)
        est = x + 0.1  # MSE = 0.01, peak 1
        assert psnr(x, est) == pytest.approx(20.0)

    def test_formula_255_peak(self):
        x = np.full(50, 255.0)
        mse = 65.025
        est = x + np.sqrt(mse)
        assert psnr(x, est) == pytest.approx(30.0)

    def test_scale_equivariance(self, rng):
        x = rng.uniform(0.2, 1.0, 64)
        est = x + rng.standard_normal(64) * 0.05
        assert psnr(3.7 * x, 3.7 * est) == pytest.approx(psnr(x, est), rel=1e-12)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            psnr(np.ones(4), np.ones(5))
        with pytest.raises(ValueError):
            psnr(np.zeros(4), np.ones(4))


class TestCoverage:
    def test_huge_variance_covers_everything(self, rng):
        ref = rng.standard_normal(100)
        report = coverage(ref, np.zeros(100), np.full(100, 1e12), 0.95)
        assert report.fraction_inside == 1.0

    def test_tiny_level_covers_nothing(self, rng):
        ref = rng.standard_normal(100) + 5.0
        report = coverage(ref, np.zeros(100), np.ones(100), 1e-9)
        assert report.fraction_inside == 0.0

    def test_map_complements_fraction(self, rng):
        ref = rng.standard_normal(200)
        report = coverage(ref, np.zeros(200), np.ones(200), 0.5)
        assert report.fraction_inside == pytest.approx(1.0 - report.outside_map.mean())

    def test_calibrated_gaussians_cover_at_level(self, rng):
        # oracle: direct simulation from the stated model
        n = 20000
        mean = rng.standard_normal(n)
        var = rng.uniform(0.5, 2.0, n)
        truth = mean + np.sqrt(var) * rng.standard_normal(n)
        for level in (0.5, 0.9, 0.95):
            frac = coverage(truth, mean, var, level).fraction_inside
            se = np.sqrt(level * (1 - level) / n)
            assert abs(frac - level) < 4 * se

    def test_level_validation(self):
        with pytest.raises(ValueError):
            coverage(np.ones(3), np.ones(3), np.ones(3), 1.0)
        with pytest.raises(ValueError):
            coverage(np.ones(3), np.ones(3), np.zeros(3), 0.5)

    def test_report_consistency_enforced(self):
        with pytest.raises(ValueError):
            CoverageReport(level=0.9, outside_map=np.array([1, 0]), fraction_inside=0.9)


class TestCoverageCurve:
    def test_monotone_in_level(self, rng):
        ref = rng.standard_normal(500)
        mean = ref + 0.3 * rng.standard_normal(500)
        var = np.full(500, 0.09)
        fracs = coverage_curve(ref, mean, var, [0.5, 0.7, 0.9, 0.95, 0.99])
        assert all(b >= a for a, b in zip(fracs, fracs[1:]))

    def test_single_level_reduces_to_coverage(self, rng):
        ref = rng.standard_normal(100)
        mean = np.zeros(100)
        var = np.ones(100)
        assert coverage_curve(ref, mean, var, [0.8])[0] == \
            coverage(ref, mean, var, 0.8).fraction_inside

    def test_unsorted_levels_rejected(self):
        with pytest.raises(ValueError):
            coverage_curve(np.ones(3), np.ones(3), np.ones(3), [0.9, 0.5])


class TestMapOutput:
    def test_written_rasters_round_trip(self, tmp_path, rng):
        var = rng.uniform(0.1, 2.0, 24)
        outside = (rng.random(24) < 0.2).astype(np.uint8)
        prefix = tmp_path / "out"
        write_uncertainty_maps(prefix, 6, 4, var, outside)
        raster = read_float_raster(f"{prefix}_variance.pepf")
        np.testing.assert_allclose(raster.data, var, rtol=1e-6)
        preview = read_pgm(f"{prefix}_uncertainty.pgm")
        assert preview.data.min() >= 0 and preview.data.max() <= 255
        cov_map = read_pgm(f"{prefix}_coverage.pgm")
        np.testing.assert_array_equal(cov_map.data, outside * 255.0)
