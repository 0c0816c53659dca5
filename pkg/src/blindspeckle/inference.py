"""Despeckling with a trained network: tiled inference and estimators."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bayes import check_looks
from .network import ONE_BY_ONE, BlindSpotShape, NetworkState, PriorField, forward, network_margin

log = logging.getLogger(__name__)


@dataclass
class Despeckled:
    posterior: np.ndarray
    prior: PriorField
    prior_mean: np.ndarray | None = None
    undefined_prior_mean: int = 0  # pixels with alpha <= 1


def prior_field_tiled(img, state: NetworkState, tile: int = 256, shape: BlindSpotShape = ONE_BY_ONE) -> PriorField:
    """Eval-mode ``(alpha, beta)`` computed tile by tile.

    Tiles overlap by the network margin on every side and the overlap is
    cropped, so each kept pixel sees exactly the context it would see in a
    single pass over the whole image.
    """
    y = np.asarray(img, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("expected a 2-D image")
    if tile < 1:
        raise ValueError("tile size must be positive")
    h, w = y.shape
    m = network_margin(state.arch, shape)
    alpha = np.empty((h, w))
    beta = np.empty((h, w))
    for r0 in range(0, h, tile):
        for c0 in range(0, w, tile):
            r1, c1 = min(r0 + tile, h), min(c0 + tile, w)
            er0, ec0 = max(r0 - m, 0), max(c0 - m, 0)
            er1, ec1 = min(r1 + m, h), min(c1 + m, w)
            pf = forward(y[er0:er1, ec0:ec1], state, shape, "eval")
            alpha[r0:r1, c0:c1] = pf.alpha[r0 - er0 : r1 - er0, c0 - ec0 : c1 - ec0]
            beta[r0:r1, c0:c1] = pf.beta[r0 - er0 : r1 - er0, c0 - ec0 : c1 - ec0]
    return PriorField(alpha, beta)


def prior_mean_image(prior: PriorField) -> tuple[np.ndarray, int]:
    """``beta / (alpha - 1)``; where the mean does not exist (alpha <= 1) the
    prior mode ``beta / (alpha + 1)`` is substituted and counted."""
    a, b = np.asarray(prior.alpha), np.asarray(prior.beta)
    ok = a > 1.0
    out = np.where(ok, b / np.where(ok, a - 1.0, 1.0), b / (a + 1.0))
    return out, int((~ok).sum())


def despeckle(img, state: NetworkState, L: float = 1.0, tile: int = 256, with_prior_mean: bool = False,
              shape: BlindSpotShape = ONE_BY_ONE) -> Despeckled:
    """Posterior-mean estimate; test time normally uses the 1x1 blind spot."""
    L = check_looks(L)
    y = np.asarray(img, dtype=np.float64)
    prior = prior_field_tiled(y, state, tile, shape)
    post = (prior.beta + L * y) / (L + prior.alpha - 1.0)
    out = Despeckled(post, prior)
    if with_prior_mean:
        out.prior_mean, out.undefined_prior_mean = prior_mean_image(prior)
        if out.undefined_prior_mean:
            log.info("prior mean undefined at %d pixels (alpha <= 1); prior mode used there",
                     out.undefined_prior_mean)
    return out
