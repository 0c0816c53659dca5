"""Desk-scale experiment protocols behind the heavier acceptance checks.

The corpus is cut from the sample images bundled with scikit-image and
scikit-learn, so nothing is fetched over the network.  Held-out tiles come
from source images that contribute nothing to the training set.

Run ``python3 -m blindspeckle.experiments desk-scale --out DIR`` for the full
synthetic despeckling protocol; it checkpoints as it goes and resumes from
the newest checkpoint in ``DIR/checkpoints`` when restarted.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .inference import despeckle
from .metrics import psnr
from .network import ArchConfig, NetworkState
from .simulate import image_seed, make_synthetic_pair
from .trainer import TrainingConfig, fit

log = logging.getLogger(__name__)

TILE = 128
TRAIN_SOURCES = (
    "astronaut", "cell", "coffee", "grass", "gravel", "hubble_deep_field",
    "immunohistochemistry", "retina", "rocket", "colorwheel", "sk:china", "sk:flower",
)
HELDOUT_SOURCES = (
    "camera", "moon", "coins", "clock", "page", "text", "brick", "chelsea",
    "shepp_logan_phantom", "logo",
)


def load_source(name: str) -> np.ndarray:
    """Grayscale float image in [0, 255] from the bundled sample data."""
    if name.startswith("sk:"):
        from sklearn.datasets import load_sample_image

        img = load_sample_image(f"{name[3:]}.jpg")
    else:
        from skimage import data

        img = getattr(data, name)()
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., :3] @ np.array([0.299, 0.587, 0.114])
    if a.max() <= 1.0:
        a = a * 255.0
    return a


def tiles(img: np.ndarray, size: int = TILE, min_std: float = 8.0, min_mean: float = 10.0) -> list[np.ndarray]:
    """Non-overlapping tiles, skipping near-empty ones (black borders, flat backgrounds)."""
    out = []
    for r in range(0, img.shape[0] - size + 1, size):
        for c in range(0, img.shape[1] - size + 1, size):
            t = img[r : r + size, c : c + size]
            if t.std() >= min_std and t.mean() >= min_mean:
                out.append(np.ascontiguousarray(t))
    return out


def build_corpus(n_train: int = 120, size: int = TILE) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Clean training tiles (round robin over sources) and one held-out tile per held-out source."""
    pools = [tiles(load_source(s), size) for s in TRAIN_SOURCES]
    train: list[np.ndarray] = []
    k = 0
    while len(train) < n_train:
        if not any(k < len(p) for p in pools):
            raise ValueError(f"only {len(train)} training tiles available")
        for p in pools:
            if k < len(p) and len(train) < n_train:
                train.append(p[k])
        k += 1
    held = []
    for s in HELDOUT_SOURCES:
        ts = tiles(load_source(s), size)
        if not ts:
            raise ValueError(f"held-out source {s} yields no usable tile")
        held.append(ts[len(ts) // 2])
    return train, held


def speckle_all(clean: list[np.ndarray], L: float, seed: int) -> list[np.ndarray]:
    return [make_synthetic_pair(c, L, image_seed(seed, i))[0] for i, c in enumerate(clean)]


def latest_checkpoint(ckdir: Path) -> Path | None:
    if (ckdir / "final.ckpt").exists():
        return ckdir / "final.ckpt"
    steps = sorted(ckdir.glob("step_*.ckpt"))
    return steps[-1] if steps else None


def train_resumable(corpus, config: TrainingConfig, arch: ArchConfig, out: Path) -> NetworkState:
    """``fit`` with checkpoints under ``out``; picks up the newest checkpoint if one exists."""
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    state = adam = None
    ck = latest_checkpoint(ckdir)
    if ck is not None:
        state, adam, _ = load_checkpoint(ck)
        log.info("resuming from %s at step %d", ck, state.step)
        if state.step >= config.total_iterations:
            return state
    return fit(corpus, config, state=state, adam=adam, arch=arch, checkpoint_dir=ckdir,
               log_path=out / "log.txt").state


@dataclass
class DeskScaleResult:
    psnr_noisy: list[float] = field(default_factory=list)
    psnr_posterior: list[float] = field(default_factory=list)
    psnr_prior_mean: list[float] = field(default_factory=list)
    mu_r: list[float] = field(default_factory=list)
    undefined_prior_mean: int = 0
    iterations: int = 0

    @staticmethod
    def _mean(v):
        return float(np.mean(v)) if v else math.nan

    @property
    def gain_db(self) -> float:
        return self._mean(self.psnr_posterior) - self._mean(self.psnr_noisy)

    @property
    def passed(self) -> bool:
        return (self.gain_db >= 6.0
                and self._mean(self.psnr_posterior) > self._mean(self.psnr_prior_mean))

    def summary(self) -> str:
        return (f"iterations={self.iterations} psnr_noisy={self._mean(self.psnr_noisy):.3f} "
                f"psnr_posterior={self._mean(self.psnr_posterior):.3f} "
                f"psnr_prior_mean={self._mean(self.psnr_prior_mean):.3f} gain_db={self.gain_db:.3f} "
                f"mu_r={self._mean(self.mu_r):.4f}")


DESK_ARCH = ArchConfig(n_blocks=8, channels=32)
DESK_CONFIG = TrainingConfig(batch_size=4, patch_size=40, lr=1e-3, lr_decay_steps=10_000, lr_decay_factor=0.1,
                             total_iterations=20_000, seed=0, log_interval=100, checkpoint_interval=500)


def evaluate_heldout(state: NetworkState, held_clean, L: float = 1.0, seed: int = 1000) -> DeskScaleResult:
    from .metrics import ratio_moments

    res = DeskScaleResult(iterations=state.step)
    for clean, noisy in zip(held_clean, speckle_all(held_clean, L, seed)):
        d = despeckle(noisy, state, L, with_prior_mean=True)
        res.psnr_noisy.append(psnr(clean, noisy))
        res.psnr_posterior.append(psnr(clean, d.posterior))
        res.psnr_prior_mean.append(psnr(clean, d.prior_mean))
        res.mu_r.append(ratio_moments(noisy, d.posterior)[0])
        res.undefined_prior_mean += d.undefined_prior_mean
    return res


def run_desk_scale(out, arch: ArchConfig = DESK_ARCH, config: TrainingConfig = DESK_CONFIG,
                   n_train: int = 120, L: float = 1.0) -> DeskScaleResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train_clean, held_clean = build_corpus(n_train)
    state = train_resumable(speckle_all(train_clean, L, config.seed), config, arch, out)
    res = evaluate_heldout(state, held_clean, L)
    (out / "result.json").write_text(json.dumps(asdict(res) | {"passed": res.passed}, indent=1) + "\n")
    log.info(res.summary())
    return res


# ---------------------------------------------------------------------------
# small-network ablations

SMALL_ARCH = ArchConfig(n_blocks=4, channels=16)
SMALL_CONFIG = TrainingConfig(batch_size=4, patch_size=40, lr=1e-3, lr_decay_steps=0, total_iterations=3000,
                              seed=0, log_interval=100, checkpoint_interval=1000)
ABLATION_EPS = 1e-4
ABLATION_SEEDS = (0, 1, 2)


def edge_chart_scene(size: int = 128) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Edge chart with a flat block; returns the clean image and the flat window
    (inset from the block edges by more than any receptive field reaches)."""
    img = np.full((size, size), 70.0)
    h = size // 2
    img[:h, :h] = 170.0
    yy, xx = np.mgrid[:h, :h]
    img[:h, h:] = np.where((xx // 4) % 2 == 0, 40.0, 200.0)  # 4-px bars
    img[h:, :h] = np.where(((yy // 8) + (xx // 8)) % 2 == 0, 60.0, 150.0)  # 8-px checks
    img[h:, h:] = 30.0 + 180.0 * xx / (h - 1)  # ramp with a step
    img[h + h // 2 :, h:] += 25.0
    inset = 10
    return img, (slice(inset, h - inset), slice(inset, h - inset))


@dataclass
class RunSpec:
    name: str
    variant: str  # "noisy", "correlated" or "whitened"
    schedule: tuple
    test_shape: object
    seed: int


def _variant(clean_noisy: np.ndarray, variant: str, psf, eps: float) -> np.ndarray:
    from .simulate import correlate_field, whiten_known_psf

    if variant == "noisy":
        return clean_noisy
    corr = correlate_field(clean_noisy, psf)
    return corr if variant == "correlated" else whiten_known_psf(corr, psf, eps)


def run_small(spec: RunSpec, out, train_clean, arch: ArchConfig = SMALL_ARCH,
              config: TrainingConfig = SMALL_CONFIG, psf=None, eps: float = ABLATION_EPS) -> dict:
    """Train one small network and score it on the test scene; cached in ``out/<name>_s<seed>``."""
    from dataclasses import replace

    from .metrics import enl, ris
    from .simulate import gaussian_psf

    psf = gaussian_psf() if psf is None else psf
    out = Path(out) / f"{spec.name}_s{spec.seed}"
    out.mkdir(parents=True, exist_ok=True)
    cached = out / "result.json"
    cfg = replace(config, seed=spec.seed, shape_schedule=spec.schedule)
    if cached.exists():
        res = json.loads(cached.read_text())
        if res.get("iterations") == cfg.total_iterations:
            return res
    noisy = speckle_all(train_clean, 1.0, 100 + spec.seed)
    corpus = [_variant(n, spec.variant, psf, eps) for n in noisy]
    state = train_resumable(corpus, cfg, arch, out)

    clean, win = edge_chart_scene()
    y, _ = make_synthetic_pair(clean, 1.0, image_seed(10_000, spec.seed))
    observed = _variant(y, "noisy" if spec.variant == "noisy" else "correlated", psf, eps)
    fed = _variant(y, spec.variant, psf, eps)
    est = despeckle(fed, state, 1.0, shape=spec.test_shape).posterior
    m = arch.n_blocks
    res = {
        "iterations": state.step,
        "enl_out": enl(est[win]),
        "enl_in": enl(observed[win]),
        "ris": ris(fed, est, 1.0, margin=m),
        "rms_edges": float(np.sqrt(np.mean((est - clean)[m:-m, m:-m] ** 2))),
    }
    res["enl_gain"] = res["enl_out"] / res["enl_in"]
    cached.write_text(json.dumps(res, indent=1) + "\n")
    return res


def whitening_ablation(out, seeds=ABLATION_SEEDS, config: TrainingConfig = SMALL_CONFIG,
                       arch: ArchConfig = SMALL_ARCH, n_train: int = 120) -> dict:
    """No whitening/1x1 vs whitened/1x1 vs whitened with the 3x1:0.9,1x1:0.1 schedule."""
    from .network import ONE_BY_ONE
    from .trainer import PAPER_SHAPE_SCHEDULE

    train_clean, _ = build_corpus(n_train)
    runs = {}
    for seed in seeds:
        for name, variant, sched in (("raw_1x1", "correlated", ((ONE_BY_ONE, 1.0),)),
                                     ("white_1x1", "whitened", ((ONE_BY_ONE, 1.0),)),
                                     ("white_sched", "whitened", PAPER_SHAPE_SCHEDULE)):
            runs[(name, seed)] = run_small(RunSpec(name, variant, sched, ONE_BY_ONE, seed), out, train_clean,
                                           arch, config)
    return runs


def ablation_orderings(runs: dict, seeds=ABLATION_SEEDS) -> dict[int, dict[str, bool]]:
    out = {}
    for s in seeds:
        raw, white, sched = runs[("raw_1x1", s)], runs[("white_1x1", s)], runs[("white_sched", s)]
        out[s] = {
            "raw_gain_below_white": raw["enl_gain"] < white["enl_gain"],
            "sched_enl_half_white": sched["enl_out"] >= 0.5 * white["enl_out"],
            "sched_ris_below_white": sched["ris"] < white["ris"],
        }
    return out


def blind_spot_tradeoff(out, seeds=ABLATION_SEEDS, config: TrainingConfig = SMALL_CONFIG,
                        arch: ArchConfig = SMALL_ARCH, n_train: int = 120) -> dict:
    """Fixed 1x1 vs fixed 3x3 blind spot, trained and applied with the same shape, on i.i.d. speckle."""
    from .network import ONE_BY_ONE, BlindSpotShape

    three = BlindSpotShape.parse("3x3")
    train_clean, _ = build_corpus(n_train)
    runs = {}
    for seed in seeds:
        runs[("bs_1x1", seed)] = run_small(RunSpec("bs_1x1", "noisy", ((ONE_BY_ONE, 1.0),), ONE_BY_ONE, seed),
                                           out, train_clean, arch, config)
        runs[("bs_3x3", seed)] = run_small(RunSpec("bs_3x3", "noisy", ((three, 1.0),), three, seed),
                                           out, train_clean, arch, config)
    return runs


def tradeoff_orderings(runs: dict, seeds=ABLATION_SEEDS) -> dict[int, dict[str, bool]]:
    out = {}
    for s in seeds:
        one, three = runs[("bs_1x1", s)], runs[("bs_3x3", s)]
        out[s] = {
            "3x3_rms_higher": three["rms_edges"] > one["rms_edges"],
            "3x3_enl_not_lower": three["enl_out"] >= one["enl_out"],
        }
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m blindspeckle.experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    d = sub.add_parser("desk-scale", help="synthetic despeckling protocol on the bundled corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--iterations", type=int, default=DESK_CONFIG.total_iterations)
    for name, helptext in (("whitening", "whitening ablation on PSF-correlated speckle"),
                           ("blind-spot", "1x1 versus 3x3 blind spot on i.i.d. speckle")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--out", required=True)
        a.add_argument("--iterations", type=int, default=SMALL_CONFIG.total_iterations)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    if args.cmd == "desk-scale":
        from dataclasses import replace

        res = run_desk_scale(args.out, config=replace(DESK_CONFIG, total_iterations=args.iterations))
        print(res.summary(), "PASS" if res.passed else "FAIL")
        return 0
    from dataclasses import replace

    cfg = replace(SMALL_CONFIG, total_iterations=args.iterations)
    if args.cmd == "whitening":
        runs, order = whitening_ablation(args.out, config=cfg), ablation_orderings
    else:
        runs, order = blind_spot_tradeoff(args.out, config=cfg), tradeoff_orderings
    for (name, seed), r in sorted(runs.items()):
        print(name, seed, " ".join(f"{k}={v:.4g}" for k, v in r.items()))
    ok = True
    for seed, checks in order(runs).items():
        for k, v in checks.items():
            ok &= v
            print(f"seed {seed}: {k} {'PASS' if v else 'FAIL'}")
    return 0 if ok else 2
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
