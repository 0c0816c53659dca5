from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import stats

from blindspeckle import imageio as io
from blindspeckle.simulate import (
    autocorrelation,
    check_psf,
    correlate_field,
    delta_psf,
    gaussian_psf,
    make_correlated_pair,
    make_synthetic_pair,
    whiten_known_psf,
)


def smooth_image(n=128, seed=0):
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    return 40 + 150 * ndimage.gaussian_filter(rng.uniform(size=(n, n)), 4) * 3


class TestImageIO:
    def test_pgm_exact(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        np.testing.assert_array_equal(io.load_grayscale(p), [[0, 128], [255, 64]])

    def test_ascii_pgm(self, tmp_path):
        p = tmp_path / "a.pgm"
        p.write_bytes(b"P2\n# comment\n2 1\n255\n7 9\n")
        np.testing.assert_array_equal(io.load_grayscale(p), [[7, 9]])

    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_roundtrip_8bit(self, tmp_path, suffix):
        img = np.random.default_rng(0).integers(0, 256, (9, 13)).astype(float)
        p = io.save_grayscale(tmp_path / f"x{suffix}", img)
        np.testing.assert_array_equal(io.load_grayscale(p), img)

    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_16bit_max_maps_to_255(self, tmp_path, suffix):
        p = io.save_grayscale(tmp_path / f"x{suffix}", np.array([[0.0, 255.0], [127.5, 1.0]]), bits=16)
        out = io.load_grayscale(p)
        assert out[0, 1] == 255.0 and out[0, 0] == 0.0
        assert out[1, 0] == pytest.approx(127.5, abs=255 / 65535)

    def test_pgm_custom_maxval(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n2 1\n1023\n" + np.array([0, 1023], ">u2").tobytes())
        np.testing.assert_allclose(io.load_grayscale(p), [[0.0, 255.0]])

    def test_colour_luminance(self, tmp_path):
        rgb = np.zeros((1, 3, 3), np.uint8)
        rgb[0, 0] = (255, 0, 0)
        rgb[0, 1] = (0, 255, 0)
        rgb[0, 2] = (10, 20, 30)
        p = tmp_path / "c.png"
        Image.fromarray(rgb).save(p)
        np.testing.assert_allclose(io.load_grayscale(p), [[0.299 * 255, 0.587 * 255, 2.99 + 11.74 + 3.42]])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.png"):
            io.load_grayscale(tmp_path / "nope.png")

    def test_garbage(self, tmp_path):
        p = tmp_path / "g.png"
        p.write_bytes(b"hello")
        with pytest.raises(io.ImageFormatError):
            io.load_grayscale(p)

    def test_raw_float_roundtrip(self, tmp_path):
        img = np.random.default_rng(1).normal(size=(5, 7)).astype(np.float32)
        p = io.write_image(tmp_path / "x.raw", img)
        assert p.read_bytes().startswith(b"5 7\n")
        np.testing.assert_array_equal(io.read_image(p), img)

    def test_raw_float_bad_length(self, tmp_path):
        p = tmp_path / "x.raw"
        p.write_bytes(b"2 2\n" + b"\0" * 12)
        with pytest.raises(io.ImageFormatError):
            io.read_raw_float(p)
        p.write_bytes(b"0 3\n")
        with pytest.raises(io.ImageFormatError):
            io.read_raw_float(p)


class TestSyntheticPair:
    def test_zero_clean(self):
        noisy, clean = make_synthetic_pair(np.zeros((8, 8)), 1.0, 3)
        assert np.all(noisy == 0) and np.all(clean == 0)

    def test_deterministic(self):
        c = smooth_image(32)
        assert np.array_equal(make_synthetic_pair(c, 1.0, 5)[0], make_synthetic_pair(c, 1.0, 5)[0])
        assert not np.array_equal(make_synthetic_pair(c, 1.0, 5)[0], make_synthetic_pair(c, 1.0, 6)[0])

    def test_unbiased_per_pixel(self):
        clean = np.array([[1.0, 10.0], [100.0, 0.5]])
        acc = np.zeros_like(clean)
        for s in range(10_000):
            acc += make_synthetic_pair(clean, 1.0, s)[0]
        np.testing.assert_allclose(acc / 10_000 / clean, 1.0, atol=0.03)

    @pytest.mark.parametrize("L", [1.0, 4.0])
    def test_ratio_distribution(self, L):
        clean = np.full((100, 1000), 37.0)
        noisy, _ = make_synthetic_pair(clean, L, 11)
        r = (noisy / clean).ravel()
        assert r.var() == pytest.approx(1 / L, rel=0.03)
        ks = stats.kstest(r, stats.gamma(a=L, scale=1 / L).cdf).statistic
        assert ks < 1.628 / np.sqrt(r.size)

    def test_negative_clean_rejected(self):
        with pytest.raises(ValueError):
            make_synthetic_pair(-np.ones((3, 3)), 1.0, 0)


class TestPsf:
    def test_gaussian_unit_sum(self):
        k = gaussian_psf()
        assert k.shape == (5, 5) and abs(k.sum() - 1) < 1e-12
        assert k[1, 2] > k[2, 1]  # vertical spread dominates

    def test_check(self):
        with pytest.raises(ValueError):
            check_psf(np.ones((2, 2)) / 4)
        with pytest.raises(ValueError):
            check_psf(np.ones((3, 3)))


class TestCorrelate:
    def test_delta_identity(self):
        x = smooth_image(20)
        np.testing.assert_array_equal(correlate_field(x, delta_psf(3)), x)

    def test_constant(self):
        np.testing.assert_allclose(correlate_field(np.full((12, 9), 4.5), gaussian_psf(1, 1)), 4.5, rtol=1e-14)

    def test_interior_mean_preserved(self):
        x = np.random.default_rng(2).gamma(1.0, 1.0, (64, 64))
        k = gaussian_psf(1.0, 0.3)
        y = correlate_field(x, k)
        # direct summation oracle on the interior
        r = 2
        direct = np.zeros((60, 60))
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                direct += k[dy + r, dx + r] * x[r - dy : 64 - r - dy, r - dx : 64 - r - dx]
        np.testing.assert_allclose(y[r:-r, r:-r], direct, rtol=1e-12)
        assert y[r:-r, r:-r].mean() == pytest.approx(direct.mean(), rel=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 2.0), st.floats(0.0, 2.0))
    def test_non_negative(self, seed, sv, sh):
        x = np.random.default_rng(seed).uniform(0, 5, (10, 11))
        assert np.all(correlate_field(x, gaussian_psf(sv, sh, 5)) >= 0)


class TestWhiten:
    def test_delta(self):
        x = smooth_image(32)
        y = whiten_known_psf(x, delta_psf(), 1e-6)
        np.testing.assert_allclose(y, x, rtol=1e-6)

    def test_roundtrip_default_psf(self):
        x = smooth_image(128)
        k = gaussian_psf()
        y = whiten_known_psf(correlate_field(x, k), k, 1e-3)
        assert np.sqrt(np.mean((y - x) ** 2)) / np.sqrt(np.mean(x**2)) < 0.01

    def test_monotone_in_eps(self):
        x = smooth_image(96, seed=3)
        k = gaussian_psf(1.0, 1.0)
        c = correlate_field(x, k)
        errs = [np.sqrt(np.mean((whiten_known_psf(c, k, e) - x) ** 2)) for e in (1e-1, 1e-2, 1e-3)]
        assert errs[0] > errs[1] > errs[2]

    def test_decorrelates_speckle(self):
        from blindspeckle.bayes import sample_speckle

        k = gaussian_psf(1.0, 1.0)
        c = correlate_field(sample_speckle(1.0, (256, 256), 4), k)
        assert abs(autocorrelation(c, 2).rho(1, 0)) > 0.3
        # the truncated sigma=1 PSF has |H| down to ~5e-4, so eps must sit below |H|^2
        w = whiten_known_psf(c, k, 1e-9)
        assert abs(autocorrelation(w, 2).rho(1, 0)) < 0.05

    def test_clamp_report(self):
        from blindspeckle.bayes import sample_speckle

        k = gaussian_psf()
        c = correlate_field(sample_speckle(1.0, (64, 64), 4), k)
        res = whiten_known_psf(c, k, 1e-4, report=True)
        assert np.all(res.image >= 0) and 0 < res.clamped_fraction < 0.5

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            whiten_known_psf(np.ones((4, 4)), delta_psf(), 0.0)

    def test_correlated_pair_is_blurred_speckle(self):
        clean = smooth_image(32)
        k = gaussian_psf()
        noisy, c2 = make_correlated_pair(clean, 1.0, k, 9)
        np.testing.assert_array_equal(c2, clean)
        np.testing.assert_allclose(noisy, correlate_field(make_synthetic_pair(clean, 1.0, 9)[0], k))


class TestAutocorrelation:
    def test_origin(self):
        m = autocorrelation(np.random.default_rng(0).normal(size=(40, 40)), 3)
        assert m.rho(0, 0) == pytest.approx(1.0) and m.values.shape == (7, 7)

    def test_iid(self):
        from blindspeckle.bayes import sample_speckle

        m = autocorrelation(sample_speckle(1.0, (512, 512), 8), 2)
        assert abs(m.rho(1, 0)) < 0.01 and abs(m.rho(0, 1)) < 0.01

    def test_anisotropy(self):
        from blindspeckle.bayes import sample_speckle

        c = correlate_field(sample_speckle(1.0, (128, 128), 2), gaussian_psf(1.0, 0.0))
        m = autocorrelation(c, 2)
        assert abs(m.rho(1, 0)) > abs(m.rho(0, 1)) + 0.3

    def test_oracle(self):
        f = np.random.default_rng(3).normal(size=(9, 11))
        m = autocorrelation(f, 2)
        z = f - f.mean()
        for dy, dx in [(1, 0), (0, 2), (-1, 1), (2, -2)]:
            a = z[max(0, -dy) : 9 - max(0, dy), max(0, -dx) : 11 - max(0, dx)]
            b = z[max(0, dy) : 9 + min(0, dy) or None, max(0, dx) : 11 + min(0, dx) or None]
            assert m.rho(dy, dx) == pytest.approx((a * b).sum() / (z * z).sum(), abs=1e-12)

    def test_constant(self):
        m = autocorrelation(np.full((10, 10), 2.0), 2)
        assert m.degenerate and not m.values.any()

    def test_too_small(self):
        with pytest.raises(ValueError):
            autocorrelation(np.zeros((4, 4)), 2)
