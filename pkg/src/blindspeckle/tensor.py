"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Only the primitives the blind-spot network and its loss need are provided.
Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient; outside a tape they run as plain numpy.

4-D tensors use the batch x channels x height x width layout.  There is no
general broadcasting: binary elementwise ops take equal shapes or a Python
scalar.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Tape",
    "GradMap",
    "backward",
    "conv2d",
    "leaky_relu",
    "norm_layer",
    "NormStats",
    "rot90",
    "translate",
    "pad2d",
    "crop2d",
    "concat",
    "channel",
    "slice_axis",
    "softplus_pos",
    "add",
    "mul",
    "sum_all",
    "g0_nll",
    "mmse",
    "tv_anisotropic",
    "masked_nonlocal",
]

_TAPES: list["Tape"] = []


class Tensor:
    """An ndarray plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], Sequence[tuple["Tensor", np.ndarray]]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else mul(other, -1.0))


class Tape:
    """Ordered record of the differentiable operations run inside ``with``."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class GradMap(dict):
    """Mapping from tensor to gradient array, keyed by tensor identity."""

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return super().__getitem__(id(t))

    def __contains__(self, t) -> bool:
        return super().__contains__(id(t))

    def get(self, t, default=None):
        return super().get(id(t), default)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(out_data: np.ndarray, inputs: Iterable[Tensor], fn) -> Tensor:
    """Wrap ``out_data``; register ``fn(g) -> [(input, grad), ...]`` if needed."""
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._backward = fn
        _TAPES[-1].nodes.append(out)
    return out


def backward(loss: Tensor, tape: Tape) -> GradMap:
    """Reverse sweep over ``tape`` seeded at the scalar ``loss``.

    Returns gradients for every tensor reached, and stores leaf gradients
    in ``.grad`` (overwriting any previous value).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                keep[key] = parent
    out = GradMap()
    for key, g in grads.items():
        t = keep[key]
        if t._backward is None:
            t.grad = g
        dict.__setitem__(out, key, g)
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """``(C, N, Hp, Wp)`` padded input to ``(C*k*k, N*h*w)`` patch columns."""
    c, n = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w]
    return cols.reshape(c * k * k, n * h * w)


def conv2d(x: Tensor, kernel: Tensor, padding=(0, 0, 0, 0), bias: Tensor | None = None) -> Tensor:
    """Zero-padded cross-correlation with unit stride.

    ``padding`` is ``(top, bottom, left, right)`` or a single int.  The kernel
    has shape ``(out_channels, in_channels, k, k)``.  Internally one GEMM over
    channel-major patch columns.
    """
    if isinstance(padding, int):
        padding = (padding,) * 4
    top, bottom, left, right = padding
    if min(padding) < 0:
        raise ValueError("padding must be non-negative")
    xd, wd = x.data, kernel.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c, hin, win = xd.shape
    o, ci, k, k2 = wd.shape
    if ci != c or k != k2:
        raise ValueError(f"kernel {wd.shape} incompatible with input {xd.shape}")
    h, w = hin + top + bottom - k + 1, win + left + right - k + 1
    if h <= 0 or w <= 0:
        raise ValueError("kernel larger than padded input")
    xc = xd.transpose(1, 0, 2, 3)
    if max(padding):
        xp = np.zeros((c, n, hin + top + bottom, win + left + right), dtype=xd.dtype)
        xp[:, :, top : top + hin, left : left + win] = xc
    else:
        xp = np.ascontiguousarray(xc)
    cols = xp.reshape(c, n * h * w) if k == 1 else _im2col(xp, k, h, w)
    wmat = wd.reshape(o, c * k * k)
    out = np.ascontiguousarray((wmat @ cols).reshape(o, n, h, w).transpose(1, 0, 2, 3))
    if k != 1:
        cols = None  # rebuilt in the backward pass to bound memory
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    inputs = [x, kernel] + ([bias] if bias is not None else [])

    def fn(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * h * w)
        res = []
        if kernel.requires_grad:
            c2 = xp.reshape(c, n * h * w) if k == 1 else _im2col(xp, k, h, w)
            res.append((kernel, (gm @ c2.T).reshape(wd.shape)))
        if x.requires_grad:
            if k == 1:
                gx = (wmat.T @ gm).reshape(c, n, h, w)[:, :, top : top + hin, left : left + win]
            else:
                # full correlation of g with the flipped, channel-transposed kernel
                gp = np.zeros((o, n, h + 2 * (k - 1), w + 2 * (k - 1)), dtype=g.dtype)
                gp[:, :, k - 1 : k - 1 + h, k - 1 : k - 1 + w] = gm.reshape(o, n, h, w)
                gp = gp[:, :, top : top + hin + k - 1, left : left + win + k - 1]
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
                gx = (wflip @ _im2col(gp, k, hin, win)).reshape(c, n, hin, win)
            res.append((x, gx.transpose(1, 0, 2, 3)))
        if bias is not None and bias.requires_grad:
            res.append((bias, g.sum(axis=(0, 2, 3))))
        return res

    return _record(out, inputs, fn)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    xd = x.data
    out = np.maximum(xd, xd * np.asarray(slope, dtype=xd.dtype))

    def fn(g):
        # sign(x) is 1 above zero and 0 or -1 elsewhere, so the max picks the slope
        return [(x, g * np.maximum(np.sign(xd), np.asarray(slope, dtype=xd.dtype)))]

    return _record(out, [x], fn)


def softplus_pos(x: Tensor, floor: float = 1e-3) -> Tensor:
    """``floor + log(1 + exp(x))``, evaluated without overflow."""
    xd = x.data
    big = xd > 30.0
    out = floor + np.where(big, xd, np.log1p(np.exp(np.minimum(xd, 30.0))))

    def fn(g):
        return [(x, g * special.expit(xd))]

    return _record(out, [x], fn)


class NormStats:
    """Running per-channel statistics for :func:`norm_layer`."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def norm_layer(x: Tensor, stats: NormStats, scale: Tensor, offset: Tensor, mode: str = "train") -> Tensor:
    """Batch normalisation over (batch, height, width) per channel.

    ``train`` uses and folds in the current batch statistics; ``eval`` uses
    only the frozen running statistics.
    """
    xd = x.data
    c = xd.shape[1]
    if stats.mean.shape[0] != c:
        raise ValueError(f"norm statistics have {stats.mean.shape[0]} channels, input has {c}")
    shp = (1, c, 1, 1)
    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = xd.size // c
        mom = stats.momentum
        stats.mean[:] = (1 - mom) * stats.mean + mom * mean
        stats.var[:] = (1 - mom) * stats.var + mom * var * (m / max(m - 1, 1))
    elif mode == "eval":
        mean, var = stats.mean, stats.var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (xd - mean.reshape(shp)) * inv.reshape(shp).astype(xd.dtype)
    out = xhat * scale.data.reshape(shp) + offset.data.reshape(shp)

    def fn(g):
        res = []
        if scale.requires_grad:
            res.append((scale, (g * xhat).sum(axis=(0, 2, 3))))
        if offset.requires_grad:
            res.append((offset, g.sum(axis=(0, 2, 3))))
        if x.requires_grad:
            gx = g * scale.data.reshape(shp)
            if mode == "train":
                gx = (
                    gx
                    - gx.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            res.append((x, gx * inv.reshape(shp).astype(xd.dtype)))
        return res

    return _record(out, [x, scale, offset], fn)


# ---------------------------------------------------------------------------
# index remaps


def rot90(x: Tensor, k: int) -> Tensor:
    """Counter-clockwise rotation by ``90 * k`` degrees over the last two axes."""
    k %= 4
    out = np.rot90(x.data, k, axes=(-2, -1)).copy()

    def fn(g):
        return [(x, np.rot90(g, -k, axes=(-2, -1)).copy())]

    return _record(out, [x], fn)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    out = np.pad(x.data, ((0, 0),) * (x.data.ndim - 2) + ((top, bottom), (left, right)))
    h, w = x.shape[-2:]

    def fn(g):
        return [(x, g[..., top : top + h, left : left + w])]

    return _record(out, [x], fn)


def crop2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    h, w = x.shape[-2:]
    out = x.data[..., top : h - bottom, left : w - right]
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., top : h - bottom, left : w - right] = g
        return [(x, gx)]

    return _record(out, [x], fn)


def translate(x: Tensor, dy: int, dx: int = 0) -> Tensor:
    """Move content by ``(dy, dx)`` pixels (down/right positive), zero fill."""
    h, w = x.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return _record(np.zeros_like(x.data), [x], lambda g: [(x, np.zeros_like(g))])
    src_r = slice(max(-dy, 0), h - max(dy, 0))
    dst_r = slice(max(dy, 0), h - max(-dy, 0))
    src_c = slice(max(-dx, 0), w - max(dx, 0))
    dst_c = slice(max(dx, 0), w - max(-dx, 0))
    out = np.zeros_like(x.data)
    out[..., dst_r, dst_c] = x.data[..., src_r, src_c]

    def fn(g):
        gx = np.zeros_like(g)
        gx[..., src_r, src_c] = g[..., dst_r, dst_c]
        return [(x, gx)]

    return _record(out, [x], fn)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def fn(g):
        res = []
        for t, a, b in zip(xs, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(a, b)
            res.append((t, g[tuple(idx)]))
        return res

    return _record(out, list(xs), fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """``x[..., start:stop, ...]`` along ``axis``."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return [(x, gx)]

    return _record(out, [x], fn)


def channel(x: Tensor, c: int) -> Tensor:
    """Select one channel of an NCHW tensor, keeping the channel axis."""
    out = x.data[:, c : c + 1]
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, c : c + 1] = g
        return [(x, gx)]

    return _record(out, [x], fn)


# ---------------------------------------------------------------------------
# arithmetic and reductions


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return _record(a.data + b, [a], lambda g: [(a, g)])
    if a.shape != b.shape:
        raise ValueError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _record(a.data + b.data, [a, b], lambda g: [(a, g), (b, g)])


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return _record(a.data * b, [a], lambda g: [(a, g * b)])
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, [a, b], lambda g: [(a, g * bd), (b, g * ad)])


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=dtype)
    return _record(out, [x], lambda g: [(x, np.full(shape, g, dtype=dtype))])


# ---------------------------------------------------------------------------
# fused statistical ops for the loss


def g0_nll(y: np.ndarray, alpha: Tensor, beta: Tensor, L: float, mask: np.ndarray | None = None) -> Tensor:
    """Per-pixel G0_I negative log-likelihood, differentiable in alpha and beta.

    Pixels where ``mask`` is False contribute 0 and receive no gradient.
    """
    from .bayes import _nll_core, nll_grad

    ad = alpha.data.astype(np.float64)
    bd = beta.data.astype(np.float64)
    yd = np.asarray(y, dtype=np.float64)
    if yd.shape != ad.shape or bd.shape != ad.shape:
        raise ValueError("g0_nll: y, alpha and beta must share a shape")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), ad.shape)
        yd = np.where(mask, yd, 1.0)
    out = _nll_core(yd, ad, bd, L)
    if mask is not None:
        out = np.where(mask, out, 0.0)
    out = out.astype(alpha.dtype)

    def fn(g):
        da, db = nll_grad(yd, ad, bd, L)
        if mask is not None:
            da, db = np.where(mask, da, 0.0), np.where(mask, db, 0.0)
        return [(alpha, (g * da).astype(alpha.dtype)), (beta, (g * db).astype(beta.dtype))]

    return _record(out, [alpha, beta], fn)


def mmse(y: np.ndarray, alpha: Tensor, beta: Tensor, L: float) -> Tensor:
    """Posterior-mean image ``(beta + L y) / (L + alpha - 1)``."""
    yd = np.asarray(y, dtype=alpha.dtype)
    num = beta.data + L * yd
    den = L + alpha.data - 1.0
    out = num / den

    def fn(g):
        return [(alpha, -g * num / den**2), (beta, g / den)]

    return _record(out, [alpha, beta], fn)


def tv_anisotropic(x: Tensor) -> Tensor:
    """Sum of absolute vertical and horizontal neighbour differences.

    Summed over every leading axis.  Subgradient at ties is zero.
    """
    xd = x.data
    dv = xd[..., 1:, :] - xd[..., :-1, :]
    dh = xd[..., :, 1:] - xd[..., :, :-1]
    out = np.asarray(np.abs(dv).sum(dtype=np.float64) + np.abs(dh).sum(dtype=np.float64), dtype=xd.dtype)

    def fn(g):
        sv, sh = np.sign(dv), np.sign(dh)
        gx = np.zeros_like(xd)
        gx[..., 1:, :] += sv
        gx[..., :-1, :] -= sv
        gx[..., :, 1:] += sh
        gx[..., :, :-1] -= sh
        return [(x, g * gx)]

    return _record(out, [x], fn)


# ---------------------------------------------------------------------------
# masked non-local block


def _patch_index(h: int, w: int, q: int):
    """Row/col offsets of a ``q x q`` neighbourhood, raster order."""
    r = q // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return dy.ravel(), dx.ravel()


def _gather(xp: np.ndarray, dys, dxs, r: int, h: int, w: int) -> np.ndarray:
    """Stack shifted views: (n, P, c, h, w) from a map padded by ``r``."""
    return np.stack([xp[:, :, r + a : r + a + h, r + b : r + b + w] for a, b in zip(dys, dxs)], axis=1)


def nonlocal_mask(h: int, w: int, q: int) -> np.ndarray:
    """Admission mask (P, h, w) for the upward half-plane neighbourhood.

    Neighbour ``(i + dy, j + dx)`` is admitted when ``dy <= 0`` (same row or
    above) and it falls inside the image.
    """
    r = q // 2
    dys, dxs = _patch_index(h, w, q)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    mask = np.empty((dys.size, h, w), dtype=bool)
    for p, (a, b) in enumerate(zip(dys, dxs)):
        inside = (ii + a >= 0) & (ii + a < h) & (jj + b >= 0) & (jj + b < w)
        mask[p] = inside & (a <= 0)
    return mask


def masked_nonlocal(x: Tensor, w_theta: Tensor, w_psi: Tensor, w_g: Tensor, q: int = 7,
                    clamp: float = 40.0) -> Tensor:
    """Masked non-local aggregation with a residual connection.

    For each pixel the logits ``(x_ij W_theta) . (x_p W_psi)`` over the
    ``q x q`` neighbourhood are exponentiated (clamped at ``clamp``), masked
    to the upward half-plane, normalised to sum to one, and used to average
    ``x_p W_g``.  Returns ``x + Z``.
    """
    if q % 2 != 1:
        raise ValueError("non-local patch size must be odd")
    xd = x.data
    n, c, h, w = xd.shape
    wt, wp, wg = w_theta.data, w_psi.data, w_g.data
    if wt.shape[0] != c or wp.shape != wt.shape or wg.shape != (c, c):
        raise ValueError("non-local weight shapes inconsistent with features")
    r = q // 2
    dys, dxs = _patch_index(h, w, q)
    mask = nonlocal_mask(h, w, q)

    # embeddings as NCHW maps
    theta = np.einsum("nchw,cl->nlhw", xd, wt)
    psi = np.einsum("nchw,cl->nlhw", xd, wp)
    gmap = np.einsum("nchw,cm->nmhw", xd, wg)
    pad = ((0, 0), (0, 0), (r, r), (r, r))
    psi_p = _gather(np.pad(psi, pad), dys, dxs, r, h, w)  # n,P,l,h,w
    g_p = _gather(np.pad(gmap, pad), dys, dxs, r, h, w)  # n,P,m,h,w
    logits = np.einsum("nlhw,nplhw->nphw", theta, psi_p)
    clipped = logits > clamp
    e = np.exp(np.minimum(logits, clamp)) * mask[None]
    # self position is always admitted, so the normaliser is positive
    denom = e.sum(axis=1, keepdims=True)
    a = e / denom
    z = np.einsum("nphw,npmhw->nmhw", a, g_p)
    out = xd + z

    def fn(gout):
        gx = gout.copy()
        # z = sum_p a_p g_p
        ga = np.einsum("nmhw,npmhw->nphw", gout, g_p)
        gg_p = a[:, :, None] * gout[:, None]  # n,P,m,h,w
        # softmax-style backward through normalisation; clamp kills gradient
        gl = a * (ga - (ga * a).sum(axis=1, keepdims=True))
        gl = np.where(clipped, 0.0, gl)
        gtheta = np.einsum("nphw,nplhw->nlhw", gl, psi_p)
        gpsi_p = gl[:, :, None] * theta[:, None]
        # scatter patch gradients back to the padded maps
        gpsi = np.zeros((n, wt.shape[1], h + 2 * r, w + 2 * r), dtype=xd.dtype)
        ggm = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=xd.dtype)
        for p, (dy, dx) in enumerate(zip(dys, dxs)):
            gpsi[:, :, r + dy : r + dy + h, r + dx : r + dx + w] += gpsi_p[:, p]
            ggm[:, :, r + dy : r + dy + h, r + dx : r + dx + w] += gg_p[:, p]
        gpsi = gpsi[:, :, r : r + h, r : r + w]
        ggm = ggm[:, :, r : r + h, r : r + w]
        gx += np.einsum("nlhw,cl->nchw", gtheta, wt)
        gx += np.einsum("nlhw,cl->nchw", gpsi, wp)
        gx += np.einsum("nmhw,cm->nchw", ggm, wg)
        res = [(x, gx)]
        if w_theta.requires_grad:
            res.append((w_theta, np.einsum("nchw,nlhw->cl", xd, gtheta)))
        if w_psi.requires_grad:
            res.append((w_psi, np.einsum("nchw,nlhw->cl", xd, gpsi)))
        if w_g.requires_grad:
            res.append((w_g, np.einsum("nchw,nmhw->cm", xd, ggm)))
        return res

    return _record(out, [x, w_theta, w_psi, w_g], fn)
