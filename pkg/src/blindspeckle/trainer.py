"""Self-supervised training loop.

Each step draws a blind-spot shape, crops a batch of noisy patches, runs the
four-branch network in train mode and minimises the G0 negative
log-likelihood of the observations plus an anisotropic TV penalty on the
posterior-mean image.  Optimisation is Adam with a step-decayed rate.

Every step derives its own generator from ``(seed, step)`` so an interrupted
run resumed from a checkpoint replays exactly the same draws as an
uninterrupted one.
"""

from __future__ import annotations

import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bayes import check_looks, neg_log_likelihood, posterior_mmse
from .network import (
    ONE_BY_ONE,
    ArchConfig,
    BlindSpotShape,
    NetworkState,
    PriorField,
    forward_tensors,
    init_state,
)

log = logging.getLogger(__name__)

PAPER_SHAPE_SCHEDULE = ((BlindSpotShape.parse("3x1"), 0.9), (ONE_BY_ONE, 0.1))


class TrainingAbort(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""

    def __init__(self, message: str, step: int, last_checkpoint: Path | None = None):
        super().__init__(f"{message} (step {step}; last good checkpoint: {last_checkpoint or 'none'})")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainingConfig:
    batch_size: int = 16
    patch_size: int = 64
    lr: float = 1e-4
    lr_decay_steps: int = 10000  # 0 disables decay
    lr_decay_factor: float = 0.1
    lambda_tv: float = 5e-5
    shape_schedule: tuple = ((ONE_BY_ONE, 1.0),)
    L: float = 1.0
    total_iterations: int = 20000
    seed: int = 0
    margin: int | None = None  # None: one pixel per residual block
    augment: bool = False
    log_interval: int = 100
    checkpoint_interval: int = 0  # 0: final checkpoint only

    def resolved_margin(self, arch: ArchConfig) -> int:
        return arch.n_blocks if self.margin is None else self.margin

    def validate(self, arch: ArchConfig) -> None:
        check_looks(self.L)
        if self.batch_size < 1 or self.total_iterations < 0:
            raise ValueError("batch_size must be positive and total_iterations non-negative")
        if self.lr <= 0 or self.lambda_tv < 0:
            raise ValueError("lr must be positive and lambda_tv non-negative")
        probs = [p for _, p in self.shape_schedule]
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"shape schedule probabilities must be non-negative and sum to 1, got {probs}")
        extent = max(s.max_shift for s, _ in self.shape_schedule)
        need = 2 * arch.n_blocks + extent
        if self.patch_size < need:
            raise ValueError(f"patch_size {self.patch_size} below 2*depth + blind-spot extent = {need}")
        if self.patch_size <= 2 * self.resolved_margin(arch):
            raise ValueError("loss margin leaves no interior pixels")

    def lr_at(self, step: int) -> float:
        if self.lr_decay_steps <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (step // self.lr_decay_steps)


# ---------------------------------------------------------------------------
# loss


def tv_anisotropic(x) -> float:
    """Anisotropic total variation of an image (or summed over a batch)."""
    return float(T.tv_anisotropic(T.Tensor(np.asarray(x, dtype=np.float64))).data)


def loss_mask(y: np.ndarray, L: float, margin: int) -> np.ndarray:
    """Pixels whose likelihood enters the loss.

    Excludes a ``margin``-wide border and, for L > 1, zero-valued
    observations (the Gamma density is zero there).
    """
    mask = np.zeros(y.shape, dtype=bool)
    h, w = y.shape[-2:]
    mask[..., margin : h - margin, margin : w - margin] = True
    if L != 1:
        mask &= y > 0
    return mask


class LikelihoodProbe:
    """Counts, per patch position, how often the likelihood was evaluated."""

    def __init__(self):
        self.counts: np.ndarray | None = None

    def record(self, mask: np.ndarray) -> None:
        m = mask.reshape(-1, *mask.shape[-2:]).sum(axis=0)
        self.counts = m if self.counts is None else self.counts + m


def loss_tensor(y: np.ndarray, alpha: T.Tensor, beta: T.Tensor, L: float, lambda_tv: float,
                margin: int = 0, probe: LikelihoodProbe | None = None) -> tuple[T.Tensor, int]:
    """Differentiable training loss on ``(B, 1, H, W)`` tensors.

    Returns the scalar loss and the number of likelihood terms.
    """
    y = np.asarray(y)
    mask = loss_mask(y, L, margin)
    if probe is not None:
        probe.record(mask)
    total = T.sum_all(T.g0_nll(y, alpha, beta, L, mask=mask))
    if lambda_tv > 0:
        xhat = T.mmse(y, alpha, beta, L)
        h, w = y.shape[-2:]
        inner = T.crop2d(xhat, margin, margin, margin, margin)
        total = T.add(total, T.mul(T.tv_anisotropic(inner), lambda_tv))
    return total, int(mask.sum())


def loss(y, prior: PriorField, L: float, lambda_tv: float, margin: int = 0) -> float:
    """Training objective evaluated from closed-form quantities.

    ``y`` and ``prior`` share a shape, ``(H, W)`` or ``(B, H, W)``.
    """
    y = np.asarray(y, dtype=np.float64)
    a = np.asarray(prior.alpha, dtype=np.float64)
    b = np.asarray(prior.beta, dtype=np.float64)
    if y.shape != a.shape or y.shape != b.shape:
        raise ValueError("y and prior fields must share a shape")
    mask = loss_mask(y, L, margin)
    nll = float(np.sum(neg_log_likelihood(y[mask], a[mask], b[mask], L)))
    if lambda_tv == 0:
        return nll
    xhat = posterior_mmse(y, a, b, L)
    h, w = y.shape[-2:]
    return nll + lambda_tv * tv_anisotropic(xhat[..., margin : h - margin, margin : w - margin])


# ---------------------------------------------------------------------------
# sampling


def sample_shape(schedule, rng: np.random.Generator) -> BlindSpotShape:
    shapes = [s for s, _ in schedule]
    probs = np.array([p for _, p in schedule], dtype=np.float64)
    if len(shapes) == 1:
        rng.random()  # keep the stream length independent of the schedule
        return shapes[0]
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return shapes[min(idx, len(shapes) - 1)]


def usable_images(corpus, patch_size: int) -> list[np.ndarray]:
    out = []
    for i, img in enumerate(corpus):
        img = np.asarray(img)
        if img.ndim != 2 or img.shape[0] < patch_size or img.shape[1] < patch_size:
            log.warning("skipping image %d with shape %s (patch size %d)", i, img.shape, patch_size)
            continue
        out.append(img)
    return out


def extract_patches(corpus, patch_size: int, rng: np.random.Generator, batch_size: int = 1,
                    augment: bool = False) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Uniform random crops.  Returns ``(batch, [(image, row, col), ...])``.

    Offsets index into ``corpus`` as given (undersized images are skipped
    with a warning and never selected).
    """
    idx = [i for i, img in enumerate(corpus)
           if np.ndim(img) == 2 and min(np.shape(img)) >= patch_size]
    if len(idx) < len(corpus):
        usable_images(corpus, patch_size)
    if not idx:
        raise ValueError("no image in the corpus is large enough for the patch size")
    batch = np.empty((batch_size, patch_size, patch_size), dtype=np.float64)
    offsets = []
    for b in range(batch_size):
        k = idx[int(rng.integers(len(idx)))]
        img = np.asarray(corpus[k])
        r = int(rng.integers(img.shape[0] - patch_size + 1))
        c = int(rng.integers(img.shape[1] - patch_size + 1))
        p = img[r : r + patch_size, c : c + patch_size]
        if augment:
            p = np.rot90(p, int(rng.integers(4)))
            if rng.random() < 0.5:
                p = p[:, ::-1]
        batch[b] = p
        offsets.append((k, r, c))
    return batch, offsets


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights, **kw) -> "AdamState":
        return cls([np.zeros_like(w.data if isinstance(w, T.Tensor) else w) for w in weights],
                   [np.zeros_like(w.data if isinstance(w, T.Tensor) else w) for w in weights], **kw)


def adam_step(weights: list, grads: list, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``weights`` (Tensors or arrays)."""
    if not (len(weights) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("weights, grads and Adam moments differ in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in weight {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        arr = w.data if isinstance(w, T.Tensor) else w
        if g.shape != arr.shape or m.shape != arr.shape:
            raise ValueError(f"shape mismatch: weight {arr.shape}, grad {g.shape}, moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(arr.dtype)


# ---------------------------------------------------------------------------
# loop


@dataclass
class LogRecord:
    iteration: int
    loss: float  # mean per-pixel loss over the interval
    lr: float
    shape_counts: dict
    wall: float | None  # seconds since fit() started; None when not recorded

    def line(self) -> str:
        shapes = ";".join(f"{k}:{v}" for k, v in sorted(self.shape_counts.items()))
        wall = "NA" if self.wall is None else f"{self.wall:.2f}"
        return f"iter={self.iteration} loss={self.loss:.8e} lr={self.lr:.3e} shapes={shapes} wall={wall}"


@dataclass
class FitResult:
    state: NetworkState
    adam: AdamState
    log: list[LogRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def batch_loss(state: NetworkState, batch: np.ndarray, config: TrainingConfig,
               shape: BlindSpotShape = ONE_BY_ONE, mode: str = "eval") -> float:
    """Per-pixel loss on a fixed batch (no weight update)."""
    margin = config.resolved_margin(state.arch)
    alpha, beta = forward_tensors(batch, state, shape, mode)
    y = (np.asarray(batch, dtype=np.float64) / state.input_scale)[:, None]
    total, n = loss_tensor(y, alpha, beta, config.L, config.lambda_tv, margin)
    return float(total.data) / max(n, 1)


def train_step(state: NetworkState, batch: np.ndarray, shape: BlindSpotShape, config: TrainingConfig,
               adam: AdamState, lr: float, probe: LikelihoodProbe | None = None) -> float:
    margin = config.resolved_margin(state.arch)
    params = state.parameters()
    y = (np.asarray(batch, dtype=np.float64) / state.input_scale)[:, None]
    with T.Tape() as tape:
        alpha, beta = forward_tensors(batch, state, shape, "train")
        total, n = loss_tensor(y, alpha, beta, config.L, config.lambda_tv, margin, probe)
    value = float(total.data)
    if not math.isfinite(value):
        raise FloatingPointError("non-finite loss")
    grads = T.backward(total, tape)
    adam_step(params, [grads.get(p, np.zeros_like(p.data)) for p in params], adam, lr)
    return value / max(n, 1)


def fit(corpus, config: TrainingConfig, state: NetworkState | None = None, adam: AdamState | None = None,
        arch: ArchConfig | None = None, checkpoint_dir=None, log_path=None,
        probe: LikelihoodProbe | None = None, dtype=np.float32, wall_clock: bool = True) -> FitResult:
    """Train on a list of noisy intensity images.

    Resumes from ``state.step`` when a state (and optionally Adam moments)
    is passed.  Checkpoints go to ``checkpoint_dir`` as ``step_XXXXXXX.ckpt``
    plus ``final.ckpt``; log lines are appended to ``log_path``.  With
    ``wall_clock=False`` the log records ``wall=NA`` so reruns are
    byte-identical.
    """
    from .checkpoint import save_checkpoint

    if state is None:
        state = init_state(arch or ArchConfig(), seed=config.seed, dtype=dtype)
    config.validate(state.arch)
    images = usable_images(corpus, config.patch_size)
    if not images:
        raise ValueError("training corpus is empty or every image is smaller than the patch size")
    if adam is None:
        adam = AdamState.zeros_like(state.parameters())
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    result = FitResult(state, adam)
    last_ckpt: Path | None = None

    def checkpoint(name: str) -> None:
        nonlocal last_ckpt
        if ckdir is not None:
            last_ckpt = save_checkpoint(ckdir / name, state, adam)
            result.checkpoints.append(last_ckpt)

    t0 = time.perf_counter()
    acc, n_acc, counts = 0.0, 0, Counter()
    while state.step < config.total_iterations:
        step = state.step
        rng = step_rng(config.seed, step)
        shape = sample_shape(config.shape_schedule, rng)
        batch, _ = extract_patches(images, config.patch_size, rng, config.batch_size, config.augment)
        lr = config.lr_at(step)
        try:
            value = train_step(state, batch, shape, config, adam, lr, probe)
        except FloatingPointError as exc:
            raise TrainingAbort(str(exc), step, last_ckpt) from exc
        state.step += 1
        acc += value
        n_acc += 1
        counts[shape.label()] += 1
        if config.log_interval and state.step % config.log_interval == 0:
            rec = LogRecord(state.step, acc / n_acc, lr, dict(counts), time.perf_counter() - t0 if wall_clock else None)
            result.log.append(rec)
            log.info(rec.line())
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(rec.line() + "\n")
            acc, n_acc, counts = 0.0, 0, Counter()
        if config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
            checkpoint(f"step_{state.step:07d}.ckpt")
    checkpoint("final.ckpt")
    return result
