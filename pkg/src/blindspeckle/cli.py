"""Command-line front end: ``blindspeckle {simulate,train,despeckle,eval,gradcheck}``.

Every command resolves its configuration (defaults < ``--config`` file <
flags), echoes it to stdout and to ``OUT/config.ini``, then works inside a
fixed output layout::

    OUT/config.ini     resolved configuration
    OUT/manifest.tsv   one row per processed image
    OUT/checkpoints/   network checkpoints
    OUT/images/        raw float32 images
    OUT/reports/       metric and self-check reports
    OUT/log.txt        training log

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("blindspeckle")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
IMAGE_SUFFIXES = (".png", ".pgm", ".pnm", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".raw", ".f32")
VARIANTS = ("noisy", "correlated", "whitened")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="run seed ([run] seed)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded, byte-reproducible mode")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP threads when not deterministic")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    ap = _Parser(prog="blindspeckle", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[shared], help="speckle clean images into a dataset")
    s.add_argument("--source", help="directory of clean images")
    s.add_argument("--looks", type=float)
    s.add_argument("--correlated", action="store_true", default=None, help="also emit PSF-correlated speckle")
    s.add_argument("--whiten", action="store_true", default=None, help="also emit whitened correlated images")

    t = sub.add_parser("train", parents=[shared], help="self-supervised training on noisy images")
    t.add_argument("--dataset", help="simulate output directory or directory of noisy images")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")

    d = sub.add_parser("despeckle", parents=[shared], help="apply a trained network")
    d.add_argument("--checkpoint")
    d.add_argument("--input", help="image file or directory")
    d.add_argument("--tile", type=int)
    d.add_argument("--prior-mean", action="store_true", default=None, help="also write the prior-mean image")

    e = sub.add_parser("eval", parents=[shared], help="quality metrics for despeckled images")
    e.add_argument("--estimates", help="despeckle output directory or directory of estimates")
    e.add_argument("--noisy", help="directory (or simulate output) holding the noisy inputs")
    e.add_argument("--reference", help="directory (or simulate output) holding clean references")

    g = sub.add_parser("gradcheck", parents=[shared], help="gradient, blind-spot and likelihood self-checks")
    g.add_argument("--precision", choices=("single", "double"))
    g.add_argument("--corrupt-shift", action="store_true", default=None,
                   help="negative control: force shift_up=0 so the blind-spot suite must fail")
    return ap


_FLAG_KEYS = {
    "seed": ("run", "seed"),
    "deterministic": ("run", "deterministic"),
    "threads": ("run", "threads"),
    ("simulate", "source"): ("simulate", "source"),
    ("simulate", "looks"): ("simulate", "looks"),
    ("simulate", "correlated"): ("simulate", "correlated"),
    ("simulate", "whiten"): ("simulate", "whiten"),
    ("train", "dataset"): ("train", "dataset"),
    ("train", "variant"): ("train", "variant"),
    ("train", "iterations"): ("train", "iterations"),
    ("train", "resume"): ("train", "resume"),
    ("despeckle", "checkpoint"): ("despeckle", "checkpoint"),
    ("despeckle", "input"): ("despeckle", "input"),
    ("despeckle", "tile"): ("despeckle", "tile"),
    ("despeckle", "prior_mean"): ("despeckle", "prior_mean"),
    ("eval", "estimates"): ("eval", "estimates"),
    ("eval", "noisy"): ("eval", "noisy"),
    ("eval", "reference"): ("eval", "reference"),
    ("gradcheck", "precision"): ("gradcheck", "precision"),
    ("gradcheck", "corrupt_shift"): ("gradcheck", "corrupt_shift"),
}


def _flag_overrides(args) -> list[str]:
    out = []
    for flag, (section, key) in _FLAG_KEYS.items():
        if isinstance(flag, tuple):
            if flag[0] != args.command:
                continue
            flag = flag[1]
        v = getattr(args, flag, None)
        if v is not None:
            out.append(f"{section}.{key}={str(v).lower() if isinstance(v, bool) else v}")
    return out


def _peek_run_section(path) -> dict[str, str]:
    """Read ``[run]`` with the standard library only, before numpy is imported."""
    import configparser

    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(path, encoding="utf-8")
        return dict(cp.items("run")) if cp.has_section("run") else {}
    except configparser.Error:
        return {}  # reported properly by RunConfig.load


def _configure_threads(deterministic: bool, threads: int) -> None:
    n = "1" if deterministic else str(max(1, threads))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n


# ---------------------------------------------------------------------------
# helpers


def _layout(out: Path) -> None:
    for sub in ("checkpoints", "images", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)


def _echo(cfg, out: Path, sections) -> None:
    text = cfg.to_ini(sections)
    print(text, end="")
    sys.stdout.flush()
    (out / "config.ini").write_text(text, encoding="utf-8")


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)] + ["\t".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_tsv(path: Path) -> list[dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def _dataset_images(root: Path, variant: str) -> list[tuple[str, Path]]:
    """``(stem, path)`` pairs: simulate outputs via their manifest, else every image in ``root``."""
    manifest = root / "manifest.tsv"
    if manifest.is_file():
        out = []
        for row in _read_tsv(manifest):
            p = root / "images" / f"{row['stem']}_{variant}.raw"
            if not p.is_file():
                raise FileNotFoundError(f"dataset has no {variant!r} image for {row['stem']}: {p}")
            out.append((row["stem"], p))
        return out
    if root.is_file():
        return [(root.stem, root)]
    return [(p.stem, p) for p in _list_images(root)]


def _find_image(root: Path, stem: str, suffixes: tuple[str, ...]) -> Path | None:
    for base in (root / "images", root):
        for tag in suffixes:
            for p in sorted(base.glob(f"{stem}{tag}.*")):
                if p.suffix.lower() in IMAGE_SUFFIXES:
                    return p
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out: Path) -> int:
    from .config import ConfigError
    from .imageio import read_image, write_raw_float
    from .simulate import gaussian_psf, image_seed, make_correlated_pair, make_synthetic_pair, whiten_known_psf

    source = cfg.get_path("simulate", "source")
    if source is None:
        raise ConfigError("simulate needs a source directory ([simulate] source or --source)")
    if not source.is_dir():
        raise FileNotFoundError(f"source directory not found: {source}")
    files = _list_images(source)
    if not files:
        raise FileNotFoundError(f"no images in source directory {source}")
    L = cfg.get_float("simulate", "looks")
    correlated = cfg.get_bool("simulate", "correlated")
    whiten = cfg.get_bool("simulate", "whiten")
    psf = gaussian_psf(cfg.get_float("simulate", "psf_sigma_v"), cfg.get_float("simulate", "psf_sigma_h"),
                       cfg.get_int("simulate", "psf_size"))
    eps = cfg.get_float("simulate", "whiten_eps")

    _layout(out)
    _echo(cfg, out, ("run", "simulate"))
    rows = []
    for i, path in enumerate(files):
        clean = read_image(path)
        seed = image_seed(cfg.seed, i)
        stem = path.stem
        noisy, _ = make_synthetic_pair(clean, L, seed)
        write_raw_float(out / "images" / f"{stem}_clean.raw", clean)
        write_raw_float(out / "images" / f"{stem}_noisy.raw", noisy)
        clamped = ""
        if correlated or whiten:
            corr, _ = make_correlated_pair(clean, L, psf, seed)
            write_raw_float(out / "images" / f"{stem}_correlated.raw", corr)
            if whiten:
                res = whiten_known_psf(corr, psf, eps, report=True)
                write_raw_float(out / "images" / f"{stem}_whitened.raw", res.image)
                clamped = repr(res.clamped_fraction)
        rows.append([i, path.name, stem, seed, repr(L), "x".join(map(str, clean.shape)), clamped])
        log.info("simulated %s (seed %d)", path.name, seed)
    _write_tsv(out / "manifest.tsv",
               ["index", "source", "stem", "seed", "looks", "shape", "whiten_clamped_fraction"], rows)
    print(f"simulated {len(rows)} images into {out}")
    return EXIT_OK


def _check_arch(cfg, state, where) -> None:
    from .config import ConfigError

    if cfg.arch_is_explicit() and cfg.arch() != state.arch:
        raise ConfigError(
            f"architecture mismatch: configured {cfg.arch().as_dict()} but checkpoint {where} has "
            f"{state.arch.as_dict()}"
        )


def cmd_train(cfg, out: Path) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .config import ConfigError
    from .imageio import read_image
    from .trainer import TrainingAbort, fit

    dataset = cfg.get_path("train", "dataset")
    if dataset is None:
        raise ConfigError("train needs a dataset ([train] dataset or --dataset)")
    if not dataset.exists():
        raise FileNotFoundError(f"dataset not found: {dataset}")
    variant = cfg.get("train", "variant")
    if variant not in VARIANTS:
        raise ConfigError(f"[train] variant must be one of {VARIANTS}, got {variant!r}")
    precision = cfg.get("train", "precision")
    if precision not in ("single", "double"):
        raise ConfigError("[train] precision must be single or double")
    dtype = np.float32 if precision == "single" else np.float64
    config = cfg.training()
    items = _dataset_images(dataset, variant)
    if not items:
        raise FileNotFoundError(f"dataset {dataset} holds no images")

    state = adam = None
    resume = cfg.get_path("train", "resume")
    if resume is not None:
        state, adam, _ = load_checkpoint(resume, dtype=dtype)
        _check_arch(cfg, state, resume)
    arch = state.arch if state is not None else cfg.arch()
    try:
        config.validate(arch)
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc

    _layout(out)
    _echo(cfg, out, ("run", "arch", "train"))
    corpus = [read_image(p) for _, p in items]
    log_path = out / "log.txt"
    if resume is None and log_path.exists():
        log_path.unlink()
    try:
        res = fit(corpus, config, state=state, adam=adam, arch=arch, checkpoint_dir=out / "checkpoints",
                  log_path=log_path, dtype=dtype, wall_clock=not cfg.get_bool("run", "deterministic"))
    except TrainingAbort as exc:
        print(f"error: training aborted at step {exc.step}: {exc}", file=sys.stderr)
        print(f"last checkpoint: {exc.last_checkpoint or 'none'}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_tsv(out / "manifest.tsv", ["index", "stem", "path"],
               [[i, stem, p] for i, (stem, p) in enumerate(items)])
    print(f"trained to step {res.state.step}; final checkpoint {res.checkpoints[-1]}")
    return EXIT_OK


def cmd_despeckle(cfg, out: Path) -> int:
    from .checkpoint import load_checkpoint
    from .config import ConfigError
    from .imageio import read_image, write_raw_float
    from .inference import despeckle

    ck = cfg.get_path("despeckle", "checkpoint")
    src = cfg.get_path("despeckle", "input")
    if ck is None or src is None:
        raise ConfigError("despeckle needs --checkpoint and --input")
    if not src.exists():
        raise FileNotFoundError(f"input not found: {src}")
    state, _, _ = load_checkpoint(ck)
    _check_arch(cfg, state, ck)
    items = _dataset_images(src, "noisy")
    if not items:
        raise FileNotFoundError(f"no input images in {src}")
    L = cfg.get_float("despeckle", "looks")
    tile = cfg.get_int("despeckle", "tile")
    want_prior = cfg.get_bool("despeckle", "prior_mean")

    _layout(out)
    _echo(cfg, out, ("run", "arch", "despeckle"))
    rows = []
    for stem, path in items:
        d = despeckle(read_image(path), state, L, tile, with_prior_mean=want_prior)
        write_raw_float(out / "images" / f"{stem}_despeckled.raw", d.posterior)
        prior = ""
        if want_prior:
            write_raw_float(out / "images" / f"{stem}_prior.raw", d.prior_mean)
            prior = f"{stem}_prior.raw"
        rows.append([stem, path, f"{stem}_despeckled.raw", prior, d.undefined_prior_mean if want_prior else ""])
    _write_tsv(out / "manifest.tsv", ["stem", "input", "despeckled", "prior_mean", "prior_mean_undefined"], rows)
    print(f"despeckled {len(rows)} images into {out / 'images'}")
    return EXIT_OK


def _aggregate(reports) -> list[tuple[str, str]]:
    import math

    fields = {
        "psnr_db": lambda r: r.psnr,
        "enl_mean": lambda r: r.mean_enl,
        "mu_r": lambda r: r.mu_r,
        "sigma_r": lambda r: r.sigma_r,
        "m_index": lambda r: r.m_index,
        "ris": lambda r: r.ris,
    }
    out = [("images", str(len(reports)))]
    for name, get in fields.items():
        vals = [get(r) for r in reports if get(r) is not None]
        out.append((name, repr(math.fsum(vals) / len(vals)) if vals else "absent"))
    return out


def cmd_eval(cfg, out: Path) -> int:
    from .config import ConfigError
    from .imageio import read_image
    from .metrics import evaluate

    est_root = cfg.get_path("eval", "estimates")
    noisy_root = cfg.get_path("eval", "noisy")
    ref_root = cfg.get_path("eval", "reference")
    if est_root is None or noisy_root is None:
        raise ConfigError("eval needs --estimates and --noisy")
    for p in (est_root, noisy_root, ref_root):
        if p is not None and not p.exists():
            raise FileNotFoundError(f"not found: {p}")
    items = _dataset_images(noisy_root, "noisy")
    if not items:
        raise FileNotFoundError(f"no noisy images in {noisy_root}")
    suffix = cfg.get("eval", "suffix")
    opts = dict(L=cfg.get_float("eval", "looks"), margin=cfg.get_int("eval", "margin"),
                n_windows=cfg.get_int("eval", "windows"), window=cfg.get_int("eval", "window"),
                peak=cfg.get_float("eval", "peak"))

    _layout(out)
    _echo(cfg, out, ("run", "eval"))
    reports, rows, failures = [], [], 0
    for stem, npath in items:
        est = _find_image(est_root, stem, (suffix, ""))
        if est is None or est == npath:
            failures += 1
            rows.append([stem, "error", f"missing estimate for {stem} in {est_root}"])
            print(f"error: missing estimate for {stem} in {est_root}", file=sys.stderr)
            continue
        ref = _find_image(ref_root, stem, ("_clean", "")) if ref_root is not None else None
        try:
            rep = evaluate(read_image(npath), read_image(est), read_image(ref) if ref else None, **opts)
        except (ValueError, OSError) as exc:
            failures += 1
            rows.append([stem, "error", str(exc).replace("\t", " ")])
            print(f"error: {stem}: {exc}", file=sys.stderr)
            continue
        (out / "reports" / f"{stem}.kv").write_text(rep.to_records(), encoding="utf-8")
        (out / "reports" / f"{stem}.txt").write_text(rep.to_text(), encoding="utf-8")
        reports.append(rep)
        rows.append([stem, "ok", est.name])
    agg = _aggregate(reports) + [("errors", str(failures))]
    (out / "reports" / "aggregate.kv").write_text("".join(f"{k}={v}\n" for k, v in agg), encoding="utf-8")
    _write_tsv(out / "manifest.tsv", ["stem", "status", "detail"], rows)
    for k, v in agg:
        print(f"{k}={v}")
    return EXIT_OK if reports else EXIT_RUNTIME


def cmd_gradcheck(cfg, out: Path) -> int:
    from dataclasses import replace

    import numpy as np

    from .config import ConfigError
    from .gradcheck import blind_spot_violations, closed_form_cases, network_loss_check
    from .network import BlindSpotShape, init_state

    precision = cfg.get("gradcheck", "precision")
    if precision not in ("single", "double"):
        raise ConfigError("[gradcheck] precision must be single or double")
    double = precision == "double"
    dtype = np.float64 if double else np.float32
    # single precision: float32 gradients against differences of a float64
    # copy, with a tolerance matching float32 accumulation error
    tol = 1e-4 if double else 1e-3
    fd_steps = (1e-5, 1e-6, 1e-7)
    arch = cfg.arch()
    seed = cfg.seed
    size = cfg.get_int("gradcheck", "size")
    lines, ok = [], True

    _layout(out)
    _echo(cfg, out, ("run", "arch", "gradcheck"))

    rng = np.random.default_rng(seed)
    batch = rng.gamma(1.0, 1.0, (1, size, size)) * 100.0
    for mode in ("eval", "train"):
        state = init_state(arch, seed=seed, dtype=dtype)
        for _, st in state.named_stats():
            st.mean[:] = rng.normal(0, 0.3, st.mean.shape)
            st.var[:] = rng.uniform(0.5, 2.0, st.var.shape)
        rep = network_loss_check(state, batch.astype(dtype), lambda_tv=5e-5, margin=arch.n_blocks,
                                 n_probes=cfg.get_int("gradcheck", "probes"), step=fd_steps,
                                 seed=seed, mode=mode, reference_dtype=None if double else np.float64)
        passed = rep.max_rel_error <= tol
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} finite-difference ({mode} mode, {precision}): "
                     f"max rel error {rep.max_rel_error:.3e} over {len(rep.probes)} weights (tol {tol:g})")
        if not passed:
            for p in rep.probes:
                if p.rel_error > tol:
                    lines.append(f"  {p.param}{list(p.index)} analytic={p.analytic!r} numeric={p.numeric!r} "
                                 f"step={p.step:g}")

    corrupt = cfg.get_bool("gradcheck", "corrupt_shift")
    bs = cfg.get_int("gradcheck", "blind_spot_size")
    for variant, a in (("local", replace(arch, nonlocal_every=0)),
                       ("non-local", replace(arch, nonlocal_every=max(1, arch.n_blocks // 2)))):
        state = init_state(a, seed=seed, dtype=np.float64)
        for label in ("1x1", "3x1"):
            claimed = BlindSpotShape.parse(label)
            used = claimed
            if corrupt:
                used = BlindSpotShape.unchecked(0, claimed.down, claimed.left, claimed.right)
            bad = blind_spot_violations(state, used, size=bs, seed=seed, claimed=claimed)
            passed = not bad
            ok &= passed
            tag = " [shift_up forced to 0]" if corrupt else ""
            lines.append(f"{'PASS' if passed else 'FAIL'} blind-spot {label} {variant}{tag}: "
                         f"{len(bad)} violations on {bs}x{bs}")
            for i, j, r, c in bad[:5]:
                lines.append(f"  output ({i},{j}) changed when blind-spot input ({r},{c}) was perturbed")

    cases = closed_form_cases(cfg.get_int("gradcheck", "likelihood_cases"), seed=seed)
    bad_cases = [c for c in cases if c.integral_error > 1e-6 or c.mmse_rel_error > 1e-6]
    ok &= not bad_cases
    lines.append(f"{'PASS' if not bad_cases else 'FAIL'} likelihood normalisation and posterior mean: "
                 f"{len(cases) - len(bad_cases)}/{len(cases)} cases within 1e-6")
    for c in bad_cases[:5]:
        lines.append(f"  y={c.y!r} alpha={c.alpha!r} beta={c.beta!r} L={c.L!r} "
                     f"integral={c.integral!r} mmse={c.mmse!r} quadrature={c.mmse_quadrature!r}")

    text = "\n".join(lines) + "\n"
    (out / "reports" / "gradcheck.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "despeckle": cmd_despeckle,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    run = _peek_run_section(args.config) if args.config else {}
    deterministic = bool(args.deterministic) or run.get("deterministic", "").strip().lower() in ("1", "true", "yes", "on")
    threads = args.threads
    if threads is None:
        try:
            threads = int(run.get("threads", "1"))
        except ValueError:
            threads = 1
    _configure_threads(deterministic, threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    from .checkpoint import CheckpointError
    from .config import ConfigError, RunConfig
    from .imageio import ImageFormatError

    try:
        cfg = RunConfig.load(args.config, _flag_overrides(args) + args.overrides)
        cfg.get_int("run", "seed")
        cfg.get_bool("run", "deterministic")
        cfg.get_int("run", "threads")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](cfg, Path(args.out))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ImageFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except (FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
