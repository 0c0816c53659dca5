"""Synthetic speckle plant: speckle injection, PSF correlation and whitening."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bayes import sample_speckle

log = logging.getLogger(__name__)

# default ablation PSF: strong vertical, weak horizontal correlation
DEFAULT_PSF_SIGMA = (1.0, 0.3)
DEFAULT_PSF_SIZE = 5


def check_psf(psf) -> np.ndarray:
    k = np.asarray(psf, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"PSF must be a 2-D grid with odd sides, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ValueError("PSF must be finite")
    if abs(k.sum() - 1.0) > 1e-9:
        raise ValueError(f"PSF must sum to 1, sums to {k.sum()!r}")
    return k


def gaussian_psf(sigma_v: float = DEFAULT_PSF_SIGMA[0], sigma_h: float = DEFAULT_PSF_SIGMA[1],
                 size: int = DEFAULT_PSF_SIZE) -> np.ndarray:
    """Separable Gaussian truncated to ``size x size`` and normalised to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError("PSF size must be a positive odd integer")
    r = np.arange(size) - size // 2

    def axis(s):
        if s <= 0:
            return (r == 0).astype(np.float64)
        with np.errstate(over="ignore"):  # tiny sigma: off-centre taps underflow to 0
            return np.exp(-0.5 * (r / s) ** 2)

    k = np.outer(axis(sigma_v), axis(sigma_h))
    return k / k.sum()


def delta_psf(size: int = 1) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return check_psf(k)


def image_seed(seed: int, index: int) -> int:
    """Independent per-image speckle seed derived from a run seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def make_synthetic_pair(clean, L: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(clean * speckle, clean)`` with i.i.d. Gamma(L, L) speckle."""
    clean = np.asarray(clean, dtype=np.float64)
    if np.any(clean < 0) or not np.all(np.isfinite(clean)):
        raise ValueError("clean image must be finite and non-negative")
    return clean * sample_speckle(L, clean.shape, seed), clean


def correlate_field(field, psf) -> np.ndarray:
    """Convolve with ``psf`` using half-sample symmetric border extension."""
    k = check_psf(psf)
    return ndimage.convolve(np.asarray(field, dtype=np.float64), k, mode="reflect")


def make_correlated_pair(clean, L: float, psf, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Speckled image seen through a system PSF: ``psf * (clean * speckle)``."""
    noisy, clean = make_synthetic_pair(clean, L, seed)
    return correlate_field(noisy, psf), clean


def _symmetric_spectrum(psf: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h2, w2 = 2 * shape[0], 2 * shape[1]
    kh, kw = psf.shape
    if kh > h2 or kw > w2:
        raise ValueError("PSF larger than the extended image")
    pad = np.zeros((h2, w2))
    pad[:kh, :kw] = psf
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.fft2(pad)


@dataclass
class WhitenResult:
    image: np.ndarray
    clamped_fraction: float


def whiten_known_psf(img, psf, eps_reg: float, report: bool = False):
    """Tikhonov-regularised inverse filter for a known PSF.

    Applies ``conj(H) / (|H|^2 + eps_reg)`` in the frequency domain on the
    mirror-extended image (period ``2H x 2W``), which exactly undoes
    :func:`correlate_field` for symmetric PSFs as ``eps_reg -> 0``.
    Negative outputs are clamped to 0; with ``report=True`` a
    :class:`WhitenResult` carrying the clamped fraction is returned.
    """
    if not eps_reg > 0:
        raise ValueError("eps_reg must be positive")
    k = check_psf(psf)
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D image")
    h, w = x.shape
    ext = np.block([[x, x[:, ::-1]], [x[::-1, :], x[::-1, ::-1]]])
    H = _symmetric_spectrum(k, (h, w))
    spec = np.fft.fft2(ext) * np.conj(H) / (np.abs(H) ** 2 + eps_reg)
    full = np.fft.ifft2(spec)
    out = full.real[:h, :w]
    resid = np.max(np.abs(full.imag)) / max(np.max(np.abs(full.real)), 1e-300)
    if resid > 1e-9:
        log.debug("whitening imaginary residue %.3g", resid)
    neg = out < 0
    frac = float(neg.mean())
    out = np.where(neg, 0.0, out)
    if report:
        return WhitenResult(out, frac)
    return out


@dataclass
class LagMap:
    """Normalised autocorrelation indexed by ``(dy, dx)`` in ``[-max_lag, max_lag]``."""

    values: np.ndarray
    max_lag: int
    degenerate: bool = False

    def rho(self, dy: int, dx: int) -> float:
        return float(self.values[dy + self.max_lag, dx + self.max_lag])


def autocorrelation(field, max_lag: int) -> LagMap:
    """Biased sample autocorrelation of the mean-removed field.

    Lag ``(dy, dx)`` pairs pixel ``(i, j)`` with ``(i + dy, j + dx)``;
    lag ``(1, 0)`` is the vertical neighbour.
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or min(f.shape) <= 2 * max_lag:
        raise ValueError(f"field of shape {f.shape} too small for max_lag {max_lag}")
    n = 2 * max_lag + 1
    z = f - f.mean()
    var = np.mean(z * z)
    if var <= 1e-12 * max(1.0, float(np.mean(f * f))):
        log.warning("autocorrelation of a constant field is undefined; returning zeros")
        return LagMap(np.zeros((n, n)), max_lag, degenerate=True)
    h, w = z.shape
    F = np.fft.rfft2(z, s=(2 * h, 2 * w))
    ac = np.fft.irfft2(F * np.conj(F), s=(2 * h, 2 * w))
    ac = np.roll(ac, (max_lag, max_lag), axis=(0, 1))[:n, :n]
    return LagMap(ac / (h * w * var), max_lag)
