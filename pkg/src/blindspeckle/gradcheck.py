"""Finite-difference probes used by the test-suite and the ``gradcheck`` command."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class ProbeResult:
    param: str
    index: tuple
    analytic: float
    numeric: float
    step: float = 0.0

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-6)
        return abs(self.analytic - self.numeric) / scale


@dataclass
class GradCheckReport:
    probes: list[ProbeResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    def worst(self) -> ProbeResult | None:
        return max(self.probes, key=lambda p: p.rel_error, default=None)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_probes: int = 10,
    step: float | Sequence[float] = 1e-5,
    seed: int = 0,
    names: Sequence[str] | None = None,
    reference: tuple[Callable[[], Tensor], Sequence[Tensor]] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` rebuilds the scalar loss from the current contents of
    ``params`` each call.  ``n_probes`` entries are chosen uniformly over all
    parameter entries.  With several step sizes the closest difference
    quotient is kept: large steps may straddle a leaky-ReLU kink and small
    ones drown in rounding, while a wrong analytic gradient disagrees at
    every step.

    ``reference`` optionally supplies a second ``(loss_fn, params)`` pair,
    typically a float64 copy, on which the differences are taken; this is
    how single-precision gradients are checked.
    """
    num_fn, num_params = reference if reference is not None else (loss_fn, params)
    steps = [float(step)] if np.isscalar(step) else [float(h) for h in step]
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    report = GradCheckReport()
    for _ in range(n_probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[k]
        idx = tuple(int(i) for i in np.unravel_index(rng.integers(p.data.size), p.data.shape))
        g = grads.get(p)
        analytic = 0.0 if g is None else float(g[idx])
        q = num_params[k]
        old = q.data[idx]
        name = names[k] if names else (p.name or f"param{k}")
        best = None
        for h in steps:
            q.data[idx] = old + h
            up = float(num_fn().data)
            q.data[idx] = old - h
            down = float(num_fn().data)
            q.data[idx] = old
            probe = ProbeResult(name, idx, analytic, (up - down) / (2 * h), h)
            if best is None or probe.rel_error < best.rel_error:
                best = probe
        report.probes.append(best)
    return report


def network_loss_check(state, batch, L: float = 1.0, lambda_tv: float = 0.0, margin: int = 0,
                       shape=None, n_probes: int = 20, step: float | Sequence[float] = 1e-5, seed: int = 0,
                       mode: str = "train", reference_dtype=None) -> GradCheckReport:
    """Probe the full training loss of ``state`` on ``batch``.

    For a float32 ``state`` pass ``reference_dtype=np.float64`` so the
    differences come from a double-precision copy of the same weights.
    """
    from .network import ONE_BY_ONE, forward_tensors
    from .trainer import loss_tensor

    shape = shape or ONE_BY_ONE
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    named = state.named_parameters()

    def make_loss(st):
        y = (batch / st.input_scale)[:, None].astype(st.dtype)

        def loss_fn():
            alpha, beta = forward_tensors(batch.astype(st.dtype), st, shape, mode)
            return loss_tensor(y, alpha, beta, L, lambda_tv, margin)[0]

        return loss_fn

    reference = None
    if reference_dtype is not None:
        ref = state.astype(reference_dtype)
        reference = (make_loss(ref), ref.parameters())
    return check_gradients(make_loss(state), [t for _, t in named], n_probes, step, seed,
                           [n for n, _ in named], reference)


# ---------------------------------------------------------------------------
# structural and closed-form suites


def blind_spot_violations(state, shape, size: int = 16, seed: int = 0,
                          claimed=None) -> list[tuple[int, int, int, int]]:
    """Perturb every input pixel; list ``(i, j, r, c)`` where output ``(i, j)``
    moved although input ``(r, c)`` lies in its blind spot.

    ``claimed`` is the shape whose hidden set is audited (default ``shape``);
    passing a different one lets a deliberately mis-shifted network be
    checked against the blind spot it ought to have.
    """
    from .network import forward

    claimed = shape if claimed is None else claimed

    rng = np.random.default_rng(seed)
    img = rng.gamma(1.0, 1.0, (size, size))
    base = forward(img, state, shape, "eval")
    bad = []
    for r in range(size):
        for c in range(size):
            p = img.copy()
            p[r, c] = p[r, c] * 3.0 + 1.0
            out = forward(p, state, shape, "eval")
            for di, dj in claimed.hidden_offsets():
                i, j = r - di, c - dj
                if 0 <= i < size and 0 <= j < size:
                    if out.alpha[i, j] != base.alpha[i, j] or out.beta[i, j] != base.beta[i, j]:
                        bad.append((i, j, r, c))
    return bad


@dataclass
class ClosedFormCase:
    y: float
    alpha: float
    beta: float
    L: float
    integral: float
    mmse: float
    mmse_quadrature: float

    @property
    def integral_error(self) -> float:
        return abs(self.integral - 1.0)

    @property
    def mmse_rel_error(self) -> float:
        return abs(self.mmse - self.mmse_quadrature) / abs(self.mmse_quadrature)


def closed_form_cases(n: int = 50, seed: int = 0) -> list[ClosedFormCase]:
    """Quadrature checks of the marginal likelihood and the posterior mean.

    For each random ``(y, alpha, beta, L)`` the marginal density must
    integrate to one over ``y``, and the closed-form posterior mean must
    match the mean of the numerically normalised likelihood-times-prior.
    """
    import math

    from scipy import integrate

    from . import bayes

    def quad(f, a=0.0, b=np.inf):
        return integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-11, limit=500)[0]

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a = float(rng.uniform(1.2, 10.0))
        b = float(np.exp(rng.uniform(np.log(0.1), np.log(100.0))))
        L = float(rng.choice([1.0, 2.0, 3.0, 4.0, 8.0]))
        y = float(b / (a - 1) * np.exp(rng.uniform(-2.0, 2.0)))
        mode = b / (a + 1)
        total = quad(lambda t: math.exp(-bayes.neg_log_likelihood(t, a, b, L)), 0.0, mode) + quad(
            lambda t: math.exp(-bayes.neg_log_likelihood(t, a, b, L)), mode
        )

        def unnorm(x):
            lik = L * math.log(L / x) + (L - 1) * math.log(y) - L * y / x - math.lgamma(L)
            prior = a * math.log(b) - math.lgamma(a) - (a + 1) * math.log(x) - b / x
            return math.exp(lik + prior)

        pm = (b + L * y) / (L + a + 1)  # posterior mode, splits the integrals
        z = quad(unnorm, 0.0, pm) + quad(unnorm, pm)
        m1 = quad(lambda x: x * unnorm(x), 0.0, pm) + quad(lambda x: x * unnorm(x), pm)
        out.append(ClosedFormCase(y, a, b, L, total, float(bayes.posterior_mmse(y, a, b, L)), m1 / z))
    return out
