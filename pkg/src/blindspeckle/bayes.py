"""Closed-form statistics of the multiplicative Gamma speckle model.

The clean intensity ``x`` carries an inverse-Gamma prior with shape ``alpha``
and scale ``beta``; the observation is ``y = n * x`` with ``n ~ Gamma(L, L)``
(unit mean, variance ``1/L``).  The conjugate pair gives an inverse-Gamma
posterior and a closed-form marginal of ``y`` (the G0_I law), whose negative
log is the training loss.

All functions accept scalars or numpy arrays and broadcast like numpy ufuncs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "UndefinedMeanError",
    "check_looks",
    "log_gamma_fn",
    "speckle_pdf",
    "sample_gamma",
    "sample_speckle",
    "posterior_params",
    "posterior_mmse",
    "prior_mean",
    "neg_log_likelihood",
    "nll_grad",
    "inv_gamma_logpdf",
]


class DomainError(ValueError):
    """An argument lies outside the domain of a density or special function."""


class UndefinedMeanError(DomainError):
    """The requested inverse-Gamma mean does not exist (shape <= 1)."""


def _arr(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def _out(v: np.ndarray):
    return float(v) if np.ndim(v) == 0 else v


def check_looks(L: float) -> float:
    L = float(L)
    if not math.isfinite(L) or L < 1.0:
        raise DomainError(f"number of looks must be a finite real >= 1, got {L}")
    return L


def _require(cond: np.ndarray, message: str) -> None:
    if not np.all(cond):
        raise DomainError(message)


def log_gamma_fn(t):
    """Natural log of the Gamma function for positive finite ``t``."""
    t = _arr(t)
    _require(np.isfinite(t) & (t > 0), "log_gamma_fn requires positive finite arguments")
    return _out(special.gammaln(t))


def speckle_pdf(n, L: float):
    """Density of unit-mean Gamma speckle, ``L^L n^(L-1) exp(-L n) / Gamma(L)``."""
    L = check_looks(L)
    n = _arr(n)
    _require(n >= 0, "speckle_pdf requires n >= 0")
    with np.errstate(divide="ignore"):
        logp = L * math.log(L) + special.xlogy(L - 1.0, n) - L * n - log_gamma_fn(L)
    return _out(np.exp(logp))


def sample_gamma(shape: float, size, rng: np.random.Generator) -> np.ndarray:
    """Gamma(shape, 1) draws by Marsaglia-Tsang squeeze/accept-reject.

    Only ``shape >= 1`` is needed here (looks are at least one).  Candidates
    are drawn in vectorised rounds; rejected slots are refilled in order, so
    the output is a deterministic function of the generator state.
    """
    if shape < 1.0:
        raise DomainError("sample_gamma supports shape >= 1 only")
    total = int(np.prod(size))
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(total, dtype=np.float64)
    filled = 0
    while filled < total:
        need = total - filled
        # acceptance rate is above 0.95 for shape >= 1
        m = int(need * 1.1) + 16
        z = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * z) ** 3
        pos = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            logv = np.where(pos, np.log(np.where(pos, v, 1.0)), -np.inf)
            squeeze = u < 1.0 - 0.0331 * z**4
            full = np.log(u) < 0.5 * z * z + d * (1.0 - v + logv)
        ok = pos & (squeeze | full)
        acc = (d * v)[ok][:need]
        out[filled : filled + acc.size] = acc
        filled += acc.size
    return out.reshape(size)


def sample_speckle(L: float, dims, seed: int) -> np.ndarray:
    """I.i.d. ``Gamma(L, rate=L)`` speckle field of shape ``dims``."""
    L = check_looks(L)
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if any(d <= 0 for d in dims):
        raise DomainError(f"dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    return sample_gamma(L, dims, rng) / L


def _check_prior(alpha: np.ndarray, beta: np.ndarray) -> None:
    _require(np.isfinite(alpha) & (alpha > 0), "alpha must be positive and finite")
    _require(np.isfinite(beta) & (beta > 0), "beta must be positive and finite")


def posterior_params(y, alpha, beta, L: float):
    """Shape and scale of the inverse-Gamma posterior: ``(L + alpha, beta + L y)``."""
    L = check_looks(L)
    y, alpha, beta = _arr(y), _arr(alpha), _arr(beta)
    _require(np.isfinite(y) & (y >= 0), "y must be finite and non-negative")
    _check_prior(alpha, beta)
    return _out(L + alpha), _out(beta + L * y)


def posterior_mmse(y, alpha, beta, L: float):
    """Posterior mean ``(beta + L y) / (L + alpha - 1)``."""
    L = check_looks(L)
    y, alpha, beta = _arr(y), _arr(alpha), _arr(beta)
    _require(np.isfinite(y) & (y >= 0), "y must be finite and non-negative")
    _require(np.isfinite(alpha) & (alpha > 0), "alpha must be positive and finite")
    # beta -> 0+ is a legitimate limit for the estimator
    _require(np.isfinite(beta) & (beta >= 0), "beta must be non-negative and finite")
    if np.any(L + alpha <= 1.0):
        raise UndefinedMeanError("posterior mean undefined for L + alpha <= 1")
    return _out((beta + L * y) / (L + alpha - 1.0))


def prior_mean(alpha, beta):
    """Mean of the inverse-Gamma prior, ``beta / (alpha - 1)``."""
    alpha, beta = _arr(alpha), _arr(beta)
    _check_prior(alpha, beta)
    if np.any(alpha <= 1.0):
        raise UndefinedMeanError("prior mean undefined for alpha <= 1")
    return _out(beta / (alpha - 1.0))


def inv_gamma_logpdf(x, shape, scale):
    """Log density of InvGamma(shape, scale) at ``x > 0``."""
    x, shape, scale = _arr(x), _arr(shape), _arr(scale)
    _require(x > 0, "inverse-Gamma density needs x > 0")
    return _out(
        shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    )


def _nll_core(y: np.ndarray, alpha: np.ndarray, beta: np.ndarray, L: float) -> np.ndarray:
    """Unchecked G0_I negative log density; +inf where the density is zero."""
    log_beta_fn = special.gammaln(L) + special.gammaln(alpha) - special.gammaln(L + alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = (
            L * math.log(L)
            + special.xlogy(L - 1.0, y)
            + alpha * np.log(beta)
            - log_beta_fn
            - (L + alpha) * np.log(beta + L * y)
        )
    return -logp


def neg_log_likelihood(y, alpha, beta, L: float):
    """``-log p(y | alpha, beta)`` under the G0_I marginal.

    ``p(y) = L^L y^(L-1) / (beta^(-alpha) B(L, alpha) (beta + L y)^(L + alpha))``.
    A zero observation with ``L > 1`` has zero density and returns ``+inf``.
    """
    L = check_looks(L)
    y, alpha, beta = _arr(y), _arr(alpha), _arr(beta)
    _require(np.isfinite(y) & (y >= 0), "y must be finite and non-negative")
    _check_prior(alpha, beta)
    return _out(_nll_core(y, alpha, beta, L))


def nll_grad(y, alpha, beta, L: float):
    """Partial derivatives of :func:`neg_log_likelihood` in ``alpha`` and ``beta``."""
    L = check_looks(L)
    y, alpha, beta = _arr(y), _arr(alpha), _arr(beta)
    s = beta + L * y
    d_alpha = special.digamma(alpha) - special.digamma(L + alpha) - np.log(beta) + np.log(s)
    d_beta = -alpha / beta + (L + alpha) / s
    return _out(d_alpha), _out(d_beta)
