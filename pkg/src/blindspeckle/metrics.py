"""Quality metrics for despeckled intensity images.

PSNR needs a clean reference.  The others are no-reference and work on
the despeckled estimate or on the ratio image ``noisy / estimate``:

* ENL over homogeneous windows (``mean^2 / var``).
* Ratio moments ``(mu_r, sigma_r)``, ideally ``(1, 1/sqrt(L))``.
* RIS: GLCM homogeneity of the ratio image in excess of the mean
  homogeneity of i.i.d. Gamma(L, L) fields of the same size.
* M index, this project's variant: a first-order term ``mean |ENL(r_w) - L| / L
  + |mean(r_w) - 1|`` over homogeneous windows, plus RIS.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .bayes import check_looks, sample_speckle

log = logging.getLogger(__name__)

ENL_CAP = 1e6
UNIT_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
RIS_LEVELS = 64
DEFAULT_BASELINE_SEEDS = tuple(range(8))
M_INDEX_VARIANT = "first_order+ris/unit-weights"


def interior(img, margin: int) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if margin <= 0:
        return a
    if 2 * margin >= min(a.shape):
        raise ValueError(f"margin {margin} leaves nothing of a {a.shape} image")
    return a[margin:-margin, margin:-margin]


def psnr(reference, estimate, peak: float = 255.0, margin: int = 0) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((interior(ref, margin) - interior(est, margin)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def enl(region) -> float:
    r = np.asarray(region, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("empty window")
    if r.size < 16:
        raise ValueError(f"ENL window needs at least 16 pixels, got {r.size}")
    mean = r.mean()
    var = r.var(ddof=1)
    if var == 0.0:
        return math.inf
    return float(mean * mean / var)


# ---------------------------------------------------------------------------
# ratio image


@dataclass
class RatioStats:
    mu: float
    sigma: float
    excluded: int
    total: int

    @property
    def excluded_fraction(self) -> float:
        return self.excluded / self.total if self.total else 0.0

    @property
    def warning(self) -> bool:
        return self.excluded_fraction > 0.10


def ratio_image(noisy, estimate, margin: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``noisy / estimate`` on the interior, with a mask of usable pixels."""
    y = interior(noisy, margin)
    x = interior(estimate, margin)
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {x.shape}")
    ok = x > 0
    r = np.divide(y, x, out=np.full(y.shape, np.nan), where=ok)
    return r, ok


def ratio_stats(noisy, estimate, margin: int = 0) -> RatioStats:
    r, ok = ratio_image(noisy, estimate, margin)
    vals = r[ok]
    excluded = int(ok.size - ok.sum())
    if excluded:
        log.info("ratio image: %d pixels with non-positive estimate excluded", excluded)
    if vals.size == 0:
        raise ValueError("estimate is non-positive everywhere")
    st = RatioStats(float(vals.mean()), float(vals.std()), excluded, int(ok.size))
    if st.warning:
        log.warning("ratio image: %.1f%% of pixels excluded", 100 * st.excluded_fraction)
    return st


def ratio_moments(noisy, estimate, margin: int = 0) -> tuple[float, float]:
    st = ratio_stats(noisy, estimate, margin)
    return st.mu, st.sigma


# ---------------------------------------------------------------------------
# texture


def quantize_quantiles(img, levels: int) -> np.ndarray:
    """Equal-probability binning into ``0 .. levels-1``; ties share a bin."""
    if levels < 2:
        raise ValueError("levels must be at least 2")
    a = np.asarray(img, dtype=np.float64)
    edges = np.quantile(a, np.arange(1, levels) / levels)
    return np.searchsorted(edges, a, side="right").astype(np.intp)


def glcm_counts(q: np.ndarray, levels: int, offsets=UNIT_OFFSETS) -> np.ndarray:
    """Symmetric co-occurrence counts of a quantised window."""
    h, w = q.shape
    counts = np.zeros((levels, levels), dtype=np.int64)
    for dy, dx in offsets:
        if abs(dy) >= h or abs(dx) >= w:
            raise ValueError(f"offset {(dy, dx)} does not fit a {q.shape} window")
        a = q[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        b = q[max(0, dy) : h + min(0, dy) or None, max(0, dx) : w + min(0, dx) or None]
        np.add.at(counts, (a.ravel(), b.ravel()), 1)
    return counts + counts.T


def homogeneity_from_counts(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        raise ValueError("empty co-occurrence matrix")
    i, j = np.indices(counts.shape)
    return float((counts / (1.0 + np.abs(i - j))).sum() / n)


def glcm_homogeneity(img, levels: int = RIS_LEVELS, offsets=UNIT_OFFSETS) -> float:
    q = quantize_quantiles(img, levels)
    return homogeneity_from_counts(glcm_counts(q, levels, offsets))


@lru_cache(maxsize=64)
def _baseline_homogeneity(shape: tuple[int, int], L: float, seeds: tuple[int, ...], levels: int) -> float:
    return float(np.mean([glcm_homogeneity(sample_speckle(L, shape, s), levels) for s in seeds]))


def ris(noisy, estimate, L: float = 1.0, baseline_seeds=DEFAULT_BASELINE_SEEDS, margin: int = 0,
        levels: int = RIS_LEVELS) -> float:
    """Ratio-image structure score: excess GLCM homogeneity over i.i.d. speckle."""
    L = check_looks(L)
    seeds = tuple(int(s) for s in baseline_seeds)
    if len(seeds) < 8:
        raise ValueError("RIS needs at least 8 baseline seeds")
    r, ok = ratio_image(noisy, estimate, margin)
    r = np.where(ok, r, 1.0)
    h = glcm_homogeneity(r, levels)
    return max(0.0, h - _baseline_homogeneity(r.shape, L, seeds, levels))


# ---------------------------------------------------------------------------
# window selection


@dataclass(frozen=True)
class Window:
    row: int
    col: int
    size: int

    def slice(self, img):
        return np.asarray(img)[self.row : self.row + self.size, self.col : self.col + self.size]

    def overlaps(self, other: "Window") -> bool:
        return not (
            self.row + self.size <= other.row
            or other.row + other.size <= self.row
            or self.col + self.size <= other.col
            or other.col + other.size <= self.col
        )


def select_homogeneous_windows(img, n: int, window: int, margin: int = 0, stride: int | None = None) -> list[Window]:
    """Greedy lowest-coefficient-of-variation, pairwise disjoint windows."""
    a = np.asarray(img, dtype=np.float64)
    if n < 1 or window < 1:
        raise ValueError("n and window must be positive")
    stride = stride or max(1, window // 4)
    h, w = a.shape
    lo, hi_r, hi_c = margin, h - margin - window, w - margin - window
    if hi_r < lo or hi_c < lo:
        raise ValueError(f"no {window}x{window} window fits inside a {a.shape} image with margin {margin}")
    rows = np.arange(lo, hi_r + 1, stride)
    cols = np.arange(lo, hi_c + 1, stride)
    m1 = ndimage.uniform_filter(a, window, mode="constant")
    m2 = ndimage.uniform_filter(a * a, window, mode="constant")
    off = window // 2  # uniform_filter centres the window
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    mean = m1[rr + off, cc + off]
    var = np.maximum(m2[rr + off, cc + off] - mean * mean, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = np.where(mean > 0, np.sqrt(var) / mean, np.inf)
    order = np.lexsort((cc.ravel(), rr.ravel(), cv.ravel()))
    chosen: list[Window] = []
    for k in order:
        cand = Window(int(rr.ravel()[k]), int(cc.ravel()[k]), window)
        if all(not cand.overlaps(c) for c in chosen):
            chosen.append(cand)
            if len(chosen) == n:
                return chosen
    raise ValueError(f"only {len(chosen)} non-overlapping {window}x{window} windows fit; requested {n}")


# ---------------------------------------------------------------------------
# M index


@dataclass
class MIndexParts:
    first_order: float
    second_order: float
    capped: bool

    @property
    def value(self) -> float:
        return self.first_order + self.second_order


def m_index_parts(noisy, estimate, n: int = 3, L: float = 1.0, window: int = 24, margin: int = 0,
                  windows: list[Window] | None = None, baseline_seeds=DEFAULT_BASELINE_SEEDS) -> MIndexParts:
    L = check_looks(L)
    r, ok = ratio_image(noisy, estimate, 0)
    r = np.where(ok, r, 1.0)
    if windows is None:
        windows = select_homogeneous_windows(estimate, n, window, margin)
    terms = []
    capped = False
    for win in windows:
        rw = win.slice(r)
        e = enl(rw)
        if e > ENL_CAP:
            e, capped = ENL_CAP, True
        terms.append(abs(e - L) / L + abs(rw.mean() - 1.0))
    second = ris(noisy, estimate, L, baseline_seeds, margin)
    return MIndexParts(float(np.mean(terms)), second, capped)


def m_index(noisy, estimate, n: int = 3, L: float = 1.0, **kw) -> float:
    return m_index_parts(noisy, estimate, n, L, **kw).value


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    psnr: float | None
    enl: list[tuple[Window, float]]
    mu_r: float
    sigma_r: float
    m_index: float
    ris: float
    margin: int
    L: float
    enl_capped: bool = False
    ratio_excluded_fraction: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def ratio_warning(self) -> bool:
        return self.ratio_excluded_fraction > 0.10

    @property
    def mean_enl(self) -> float:
        return float(np.mean([v for _, v in self.enl])) if self.enl else math.nan

    def records(self) -> list[tuple[str, str]]:
        """Stable ``key=value`` schema; floats use round-trip ``repr``."""
        out = [
            ("psnr_db", "absent" if self.psnr is None else repr(float(self.psnr))),
            ("mu_r", repr(self.mu_r)),
            ("sigma_r", repr(self.sigma_r)),
            ("m_index", repr(self.m_index)),
            ("m_index_variant", M_INDEX_VARIANT),
            ("ris", repr(self.ris)),
            ("enl_mean", repr(self.mean_enl)),
            ("enl_count", str(len(self.enl))),
        ]
        for i, (win, v) in enumerate(self.enl):
            out.append((f"enl.{i}", repr(float(v))))
            out.append((f"enl.{i}.window", f"{win.row},{win.col},{win.size}"))
        out += [
            ("margin", str(self.margin)),
            ("looks", repr(float(self.L))),
            ("enl_capped", str(int(self.enl_capped))),
            ("ratio_excluded_fraction", repr(self.ratio_excluded_fraction)),
            ("ratio_warning", str(int(self.ratio_warning))),
        ]
        out += [(f"note.{k}", str(v)) for k, v in sorted(self.notes.items())]
        return out

    def to_records(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.records())

    def to_text(self) -> str:
        def f(v, fmt="{:.4f}"):
            return "absent" if v is None else ("inf" if v == math.inf else fmt.format(v))

        lines = [
            f"{'metric':<22}{'value':>14}",
            f"{'PSNR (dB)':<22}{f(self.psnr, '{:.3f}'):>14}",
            f"{'ENL (mean)':<22}{f(self.mean_enl, '{:.3f}'):>14}",
            f"{'ratio mean':<22}{f(self.mu_r):>14}",
            f"{'ratio std':<22}{f(self.sigma_r):>14}",
            f"{'M index':<22}{f(self.m_index):>14}",
            f"{'RIS':<22}{f(self.ris):>14}",
            "",
            f"M index variant: {M_INDEX_VARIANT}; border margin {self.margin} px; L = {self.L:g}",
        ]
        for i, (win, v) in enumerate(self.enl):
            lines.append(f"ENL window {i}: row {win.row} col {win.col} size {win.size} -> {f(v, '{:.3f}')}")
        if self.enl_capped:
            lines.append(f"ENL capped at {ENL_CAP:g} inside the M index")
        if self.ratio_warning:
            lines.append(f"warning: {100 * self.ratio_excluded_fraction:.1f}% of ratio pixels excluded")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_records(cls, text: str) -> "MetricsReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k] = v
        n = int(kv["enl_count"])
        enl_list = []
        for i in range(n):
            r, c, s = (int(t) for t in kv[f"enl.{i}.window"].split(","))
            enl_list.append((Window(r, c, s), float(kv[f"enl.{i}"])))
        return cls(
            psnr=None if kv["psnr_db"] == "absent" else float(kv["psnr_db"]),
            enl=enl_list,
            mu_r=float(kv["mu_r"]),
            sigma_r=float(kv["sigma_r"]),
            m_index=float(kv["m_index"]),
            ris=float(kv["ris"]),
            margin=int(kv["margin"]),
            L=float(kv["looks"]),
            enl_capped=bool(int(kv["enl_capped"])),
            ratio_excluded_fraction=float(kv["ratio_excluded_fraction"]),
            notes={k[5:]: v for k, v in kv.items() if k.startswith("note.")},
        )


def evaluate(noisy, estimate, clean=None, L: float = 1.0, margin: int = 0, n_windows: int = 3,
             window: int = 24, windows: list[Window] | None = None,
             baseline_seeds=DEFAULT_BASELINE_SEEDS, peak: float = 255.0) -> MetricsReport:
    """Full metrics report for one despeckled image."""
    noisy = np.asarray(noisy, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if windows is None:
        windows = select_homogeneous_windows(estimate, n_windows, window, margin)
    st = ratio_stats(noisy, estimate, margin)
    parts = m_index_parts(noisy, estimate, L=L, margin=margin, windows=windows, baseline_seeds=baseline_seeds)
    return MetricsReport(
        psnr=None if clean is None else psnr(clean, estimate, peak, margin),
        enl=[(w, enl(w.slice(estimate))) for w in windows],
        mu_r=st.mu,
        sigma_r=st.sigma,
        m_index=parts.value,
        ris=parts.second_order,
        margin=margin,
        L=L,
        enl_capped=parts.capped,
        ratio_excluded_fraction=st.excluded_fraction,
    )
