from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from blindspeckle import metrics as M
from blindspeckle.bayes import sample_speckle
from blindspeckle.simulate import make_synthetic_pair


def scene(n=256, seed=0):
    """Piecewise-constant scene with a smooth ramp: flat areas and edges."""
    yy, xx = np.mgrid[:n, :n]
    img = 40.0 + 120.0 * ((yy // (n // 4) + xx // (n // 4)) % 2) + 30.0 * (xx > n // 2)
    return img


def naive_glcm(q, levels, offsets):
    h, w = q.shape
    c = np.zeros((levels, levels), dtype=np.int64)
    for dy, dx in offsets:
        for i in range(h):
            for j in range(w):
                i2, j2 = i + dy, j + dx
                if 0 <= i2 < h and 0 <= j2 < w:
                    c[q[i, j], q[i2, j2]] += 1
                    c[q[i2, j2], q[i, j]] += 1
    return c


class TestPsnr:
    def test_identical(self):
        x = np.random.default_rng(0).uniform(0, 255, (8, 8))
        assert M.psnr(x, x) == math.inf

    def test_uniform_error(self):
        x = np.full((4, 4), 100.0)
        assert M.psnr(x, x + 16) == pytest.approx(10 * math.log10(255**2 / 256), abs=1e-12)
        assert M.psnr(x, x + 16) == pytest.approx(24.05, abs=5e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.psnr(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.1, 50), st.floats(0.1, 50))
    def test_sign_symmetric_and_monotone(self, a, b):
        x = np.full((5, 5), 100.0)
        assert M.psnr(x, x + a) == pytest.approx(M.psnr(x, x - a), rel=1e-12)
        if a < b:
            assert M.psnr(x, x + a) > M.psnr(x, x + b)

    def test_margin(self):
        x = np.zeros((10, 10))
        y = x.copy()
        y[0, :] = 50
        assert M.psnr(x, y, margin=1) == math.inf


class TestEnl:
    def test_constant(self):
        assert M.enl(np.full((5, 5), 3.0)) == math.inf

    @pytest.mark.parametrize("L,tol", [(1.0, 0.05), (4.0, 0.2)])
    def test_pure_speckle(self, L, tol):
        assert M.enl(sample_speckle(L, (256, 256), 1)) == pytest.approx(L, abs=tol)

    def test_small_window(self):
        with pytest.raises(ValueError):
            M.enl(np.ones(15))
        with pytest.raises(ValueError):
            M.enl(np.array([]))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_scale_invariant(self, c, seed):
        r = np.random.default_rng(seed).gamma(2.0, 1.0, 64)
        assert M.enl(c * r) == pytest.approx(M.enl(r), rel=1e-10)


class TestRatio:
    def test_identity(self):
        y = sample_speckle(1.0, (32, 32), 0) * 50
        mu, sigma = M.ratio_moments(y, y)
        assert mu == pytest.approx(1.0) and sigma == pytest.approx(0.0, abs=1e-12)

    def test_ideal_despeckler(self):
        clean = ndimage.gaussian_filter(scene(512), 2) + 5
        noisy, _ = make_synthetic_pair(clean, 1.0, 3)
        mu, sigma = M.ratio_moments(noisy, clean)
        assert abs(mu - 1) <= 0.01 and abs(sigma - 1) <= 0.02
        mu2, _ = M.ratio_moments(noisy, 2 * clean)
        assert abs(mu2 - 0.5) <= 0.01

    def test_excluded_pixels_flagged(self):
        y = np.ones((10, 10))
        x = np.ones((10, 10))
        x[:2] = 0.0
        st_ = M.ratio_stats(y, x)
        assert st_.excluded == 20 and st_.warning
        assert not M.ratio_stats(y, np.ones((10, 10))).warning


class TestGlcm:
    def test_constant(self):
        assert M.glcm_homogeneity(np.full((6, 6), 7.0), 8) == 1.0

    def test_checkerboard(self):
        cb = (np.indices((8, 8)).sum(0) % 2).astype(float) * 255
        assert M.glcm_homogeneity(cb, 2, [(0, 1)]) == 0.5

    def test_direct_count_oracle(self):
        img = np.random.default_rng(4).uniform(size=(24, 20))
        q = M.quantize_quantiles(img, 64)
        counts = M.glcm_counts(q, 64, M.UNIT_OFFSETS)
        assert np.array_equal(counts, naive_glcm(q, 64, M.UNIT_OFFSETS))
        i, j = np.indices((64, 64))
        manual = sum(counts[a, b] / (1 + abs(a - b)) for a in range(64) for b in range(64)) / counts.sum()
        assert M.glcm_homogeneity(img, 64) == pytest.approx(manual, rel=1e-12)

    def test_quantile_bins_equal_mass(self):
        q = M.quantize_quantiles(np.random.default_rng(0).normal(size=6400), 64)
        assert np.all(np.bincount(q, minlength=64) == 100)

    def test_offset_too_large(self):
        with pytest.raises(ValueError):
            M.glcm_homogeneity(np.ones((3, 3)), 2, [(3, 0)])

    def test_monotone_invariance(self):
        img = np.random.default_rng(1).uniform(1, 2, (16, 16))
        assert M.glcm_homogeneity(img, 16) == M.glcm_homogeneity(np.exp(3 * img), 16)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 16), st.integers(3, 12))
    def test_range_and_unit_iff_constant(self, seed, levels, n):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 3, (n, n)).astype(float)
        h = M.glcm_homogeneity(img, levels)
        assert 0.0 <= h <= 1.0
        q = M.quantize_quantiles(img, levels)
        assert (h == 1.0) == bool(np.all(q == q.flat[0]))


class TestRis:
    def test_iid_ratio_near_zero(self):
        r = sample_speckle(1.0, (128, 128), 1234)
        assert M.ris(r, np.ones_like(r)) <= 0.01

    def test_structure_increases_ris(self):
        base = sample_speckle(1.0, (128, 128), 55)
        structured = base * np.where(np.arange(128)[None, :] < 64, 1.0, 3.0)
        assert M.ris(structured, np.ones_like(base)) > M.ris(base, np.ones_like(base))

    def test_needs_eight_seeds(self):
        with pytest.raises(ValueError):
            M.ris(np.ones((8, 8)), np.ones((8, 8)), 1.0, baseline_seeds=range(7))

    def test_non_negative(self):
        clean = scene(64) + 1
        noisy, _ = make_synthetic_pair(clean, 1.0, 0)
        assert M.ris(noisy, ndimage.uniform_filter(noisy, 3)) >= 0.0


class TestWindows:
    def test_constant_quadrant(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(10, 200, (64, 64))
        img[32:, :32] = 80.0
        (w,) = M.select_homogeneous_windows(img, 1, 16)
        assert w.row >= 32 and w.col + w.size <= 32

    def test_non_overlapping(self):
        img = np.random.default_rng(1).gamma(1.0, 1.0, (96, 96))
        wins = M.select_homogeneous_windows(img, 6, 20, margin=3)
        assert len(wins) == 6
        assert all(not a.overlaps(b) for i, a in enumerate(wins) for b in wins[i + 1 :])
        assert all(w.row >= 3 and w.row + 20 <= 93 for w in wins)

    def test_two_textures(self):
        rng = np.random.default_rng(2)
        img = np.empty((64, 128))
        img[:, :64] = 100 * rng.gamma(16.0, 1 / 16.0, (64, 64))
        img[:, 64:] = 100 * rng.gamma(1.0, 1.0, (64, 64))
        wins = M.select_homogeneous_windows(img, 3, 16)
        assert all(w.col + w.size <= 64 for w in wins)

    def test_insufficient_area(self):
        with pytest.raises(ValueError, match="only 1"):
            M.select_homogeneous_windows(np.ones((20, 20)), 2, 16)


class TestMIndex:
    def test_ideal_small(self):
        clean = ndimage.gaussian_filter(scene(256), 1) + 5
        noisy, _ = make_synthetic_pair(clean, 1.0, 9)
        assert M.m_index(noisy, clean) < 0.15

    def test_identity_large_and_capped(self):
        noisy, _ = make_synthetic_pair(scene(128) + 5, 1.0, 1)
        parts = M.m_index_parts(noisy, noisy)
        assert parts.capped and parts.value > 1

    def test_blur_second_order_above_ideal(self):
        clean = ndimage.gaussian_filter(scene(256), 1) + 5
        noisy, _ = make_synthetic_pair(clean, 1.0, 9)
        ideal = M.m_index_parts(noisy, clean)
        blurred = M.m_index_parts(noisy, ndimage.gaussian_filter(noisy, 8))
        assert blurred.second_order > ideal.second_order


class TestReport:
    def make(self):
        clean = ndimage.gaussian_filter(scene(128), 1) + 5
        noisy, _ = make_synthetic_pair(clean, 1.0, 2)
        est = ndimage.uniform_filter(noisy, 5)
        return M.evaluate(noisy, est, clean, margin=4, n_windows=2, window=16)

    def test_records_roundtrip(self):
        rep = self.make()
        back = M.MetricsReport.from_records(rep.to_records())
        assert back == rep

    def test_fields(self):
        rep = self.make()
        assert rep.psnr is not None and rep.mean_enl > 0 and rep.ris >= 0 and rep.sigma_r >= 0
        keys = [k for k, _ in rep.records()]
        for k in ("psnr_db", "mu_r", "sigma_r", "m_index", "ris", "enl_mean", "margin", "m_index_variant"):
            assert k in keys
        text = rep.to_text()
        assert "PSNR (dB)" in text and "M index variant" in text

    def test_absent_psnr(self):
        noisy = sample_speckle(1.0, (64, 64), 0) * 30
        rep = M.evaluate(noisy, ndimage.uniform_filter(noisy, 3), None, n_windows=1, window=16)
        assert rep.psnr is None
        assert M.MetricsReport.from_records(rep.to_records()).psnr is None
