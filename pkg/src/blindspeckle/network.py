"""Four-branch rotated blind-spot network producing per-pixel inverse-Gamma priors.

Each branch sees the image through one quarter-turn rotation and grows its
receptive field only upwards (in its own frame).  Rows 0/180 degrees share
the vertical weight set, 90/270 degrees the horizontal one.  After the
branches, each map is translated away from the centre by its blind-spot
shift, rotated back, concatenated and fused by 1x1 convolutions into raw
``(alpha, beta)`` maps, which a softplus makes positive.

Rotations are counter-clockwise (``np.rot90``).  Under that convention the
90-degree branch covers the right half-plane and the 270-degree branch the
left one.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NormStats, Tensor

ROTATION_CONVENTION = "ccw"
POSITIVE_FLOOR = 1e-3

__all__ = [
    "ArchConfig",
    "BlindSpotShape",
    "BranchWeights",
    "BranchFeatures",
    "NetworkState",
    "PriorField",
    "init_state",
    "rotate_quarter",
    "shifted_conv",
    "directional_branch",
    "shape_blind_spot",
    "merge_heads",
    "positive_map",
    "forward",
    "forward_tensors",
    "network_margin",
]


@dataclass(frozen=True)
class BlindSpotShape:
    """Per-direction shifts; a shift of ``s`` hides ``s`` pixels on that side
    counting the centre, so all-ones hides only the centre pixel."""

    up: int = 1
    down: int = 1
    left: int = 1
    right: int = 1

    def __post_init__(self):
        for name in ("up", "down", "left", "right"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"blind-spot shift {name}={v} must be an integer >= 1")

    @classmethod
    def parse(cls, text: str) -> "BlindSpotShape":
        """Accept ``RxC`` with odd extents (``1x1``, ``3x1``) or ``up,down,left,right``."""
        text = text.strip().lower()
        m = re.fullmatch(r"(\d+)\s*[x×]\s*(\d+)", text)
        if m:
            rows, cols = int(m.group(1)), int(m.group(2))
            if rows % 2 == 0 or cols % 2 == 0:
                raise ValueError(f"blind-spot extents must be odd, got {text}")
            v, h = rows // 2 + 1, cols // 2 + 1
            return cls(v, v, h, h)
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"cannot parse blind-spot shape {text!r}")
        return cls(*parts)

    @classmethod
    def unchecked(cls, up: int, down: int, left: int, right: int) -> "BlindSpotShape":
        """Build a shape without validation; only for negative-control diagnostics."""
        obj = object.__new__(cls)
        for name, v in zip(("up", "down", "left", "right"), (up, down, left, right)):
            object.__setattr__(obj, name, int(v))
        return obj

    def label(self) -> str:
        if self.up == self.down and self.left == self.right:
            return f"{2 * self.up - 1}x{2 * self.left - 1}"
        return f"{self.up},{self.down},{self.left},{self.right}"

    @property
    def max_shift(self) -> int:
        return max(self.up, self.down, self.left, self.right)

    def hidden_offsets(self) -> list[tuple[int, int]]:
        """Input offsets ``(di, dj)`` the output at the origin cannot see."""
        return [
            (di, dj)
            for di in range(-(self.up - 1), self.down)
            for dj in range(-(self.left - 1), self.right)
        ]


ONE_BY_ONE = BlindSpotShape()


@dataclass
class ArchConfig:
    n_blocks: int = 8
    channels: int = 32
    kernel: int = 3
    nonlocal_every: int = 0  # 0 disables the non-local layers
    nonlocal_q: int = 7
    slope: float = 0.1

    def validate(self) -> None:
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.n_blocks < 1 or self.channels < 1:
            raise ValueError("need at least one block and one channel")
        if self.nonlocal_every < 0 or (self.nonlocal_every and self.nonlocal_q % 2 != 1):
            raise ValueError("non-local patch size must be odd")

    @property
    def n_nonlocal(self) -> int:
        return self.n_blocks // self.nonlocal_every if self.nonlocal_every else 0

    def as_dict(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "channels": self.channels,
            "kernel": self.kernel,
            "nonlocal_every": self.nonlocal_every,
            "nonlocal_q": self.nonlocal_q,
            "slope": self.slope,
        }


@dataclass
class BranchWeights:
    kernels: list[Tensor]
    scales: list[Tensor]
    offsets: list[Tensor]
    stats: list[NormStats]
    nonlocal_weights: list[tuple[Tensor, Tensor, Tensor]] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        ps = [*self.kernels, *self.scales, *self.offsets]
        for trip in self.nonlocal_weights:
            ps.extend(trip)
        return ps


@dataclass
class NetworkState:
    arch: ArchConfig
    vertical: BranchWeights
    horizontal: BranchWeights
    merge_kernels: list[Tensor]
    merge_biases: list[Tensor]
    input_scale: float = 255.0
    step: int = 0

    @property
    def dtype(self):
        return self.merge_kernels[0].dtype

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in the fixed order used by checkpoints."""
        out = []
        for tag, br in (("vertical", self.vertical), ("horizontal", self.horizontal)):
            for i in range(len(br.kernels)):
                out.append((f"{tag}.conv{i}.kernel", br.kernels[i]))
                out.append((f"{tag}.norm{i}.scale", br.scales[i]))
                out.append((f"{tag}.norm{i}.offset", br.offsets[i]))
            for j, (wt, wp, wg) in enumerate(br.nonlocal_weights):
                out.append((f"{tag}.nonlocal{j}.theta", wt))
                out.append((f"{tag}.nonlocal{j}.psi", wp))
                out.append((f"{tag}.nonlocal{j}.g", wg))
        for i, (k, b) in enumerate(zip(self.merge_kernels, self.merge_biases)):
            out.append((f"merge{i}.kernel", k))
            out.append((f"merge{i}.bias", b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_stats(self) -> list[tuple[str, NormStats]]:
        out = []
        for tag, br in (("vertical", self.vertical), ("horizontal", self.horizontal)):
            out.extend((f"{tag}.norm{i}", s) for i, s in enumerate(br.stats))
        return out

    def astype(self, dtype) -> "NetworkState":
        """Deep copy with every array cast to ``dtype``."""

        def cast(t: Tensor) -> Tensor:
            return Tensor(t.data.astype(dtype, copy=True), requires_grad=t.requires_grad, name=t.name)

        def cast_stats(s: NormStats) -> NormStats:
            ns = NormStats(s.mean.size, dtype=dtype, momentum=s.momentum, eps=s.eps)
            ns.mean[:] = s.mean
            ns.var[:] = s.var
            return ns

        def cast_branch(b: BranchWeights) -> BranchWeights:
            return BranchWeights(
                [cast(t) for t in b.kernels],
                [cast(t) for t in b.scales],
                [cast(t) for t in b.offsets],
                [cast_stats(s) for s in b.stats],
                [tuple(cast(t) for t in trip) for trip in b.nonlocal_weights],
            )

        return NetworkState(
            ArchConfig(**self.arch.as_dict()),
            cast_branch(self.vertical),
            cast_branch(self.horizontal),
            [cast(t) for t in self.merge_kernels],
            [cast(t) for t in self.merge_biases],
            self.input_scale,
            self.step,
        )


@dataclass
class BranchFeatures:
    """Four directional maps in the common (unrotated) frame."""

    up: Tensor
    down: Tensor
    left: Tensor
    right: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.up, self.down, self.left, self.right]


@dataclass
class PriorField:
    """Per-pixel inverse-Gamma parameters; ``beta`` in input intensity units."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must share a shape")


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=shape).astype(dtype), requires_grad=True)


def _init_branch(arch: ArchConfig, rng, dtype) -> BranchWeights:
    c, k = arch.channels, arch.kernel
    kernels, scales, offsets, stats = [], [], [], []
    for i in range(arch.n_blocks):
        cin = 1 if i == 0 else c
        kernels.append(_glorot(rng, (c, cin, k, k), cin * k * k, c * k * k, dtype))
        scales.append(Tensor(np.ones(c, dtype=dtype), requires_grad=True))
        offsets.append(Tensor(np.zeros(c, dtype=dtype), requires_grad=True))
        stats.append(NormStats(c, dtype=dtype))
    nl = [
        tuple(_glorot(rng, (c, c), c, c, dtype) for _ in range(3)) for _ in range(arch.n_nonlocal)
    ]
    return BranchWeights(kernels, scales, offsets, stats, nl)


def merge_widths(arch: ArchConfig) -> list[tuple[int, int]]:
    c = arch.channels
    return [(4 * c, 2 * c), (2 * c, c), (c, 2)]


def init_state(arch: ArchConfig | None = None, seed: int = 0, dtype=np.float32,
               input_scale: float = 255.0) -> NetworkState:
    """Fresh weights: uniform Glorot kernels, unit norm scales, zero offsets."""
    arch = arch or ArchConfig()
    arch.validate()
    rng = np.random.default_rng(seed)
    vertical = _init_branch(arch, rng, dtype)
    horizontal = _init_branch(arch, rng, dtype)
    mk, mb = [], []
    for cin, cout in merge_widths(arch):
        mk.append(_glorot(rng, (cout, cin, 1, 1), cin, cout, dtype))
        mb.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
    return NetworkState(arch, vertical, horizontal, mk, mb, float(input_scale))


def network_margin(arch: ArchConfig, shape: BlindSpotShape = ONE_BY_ONE) -> int:
    """Distance from the border beyond which outputs never see zero padding."""
    r = arch.kernel // 2
    return 2 * r * arch.n_blocks + (arch.nonlocal_q // 2) * arch.n_nonlocal + shape.max_shift


# ---------------------------------------------------------------------------
# building blocks


def rotate_quarter(img, k: int):
    """Counter-clockwise rotation by ``90 k`` degrees (arrays or tensors)."""
    if isinstance(img, Tensor):
        return T.rot90(img, k)
    return np.rot90(np.asarray(img), k % 4, axes=(-2, -1)).copy()


def shifted_conv(x: Tensor, kernel: Tensor) -> Tensor:
    """Convolution whose output row ``i`` depends only on input rows ``<= i``.

    Equivalent to translating the map down by ``k // 2`` rows (zero fill,
    bottom rows dropped) and applying a same-padded ``k x k`` convolution;
    done as a bottom crop plus one asymmetric pad.
    """
    k = kernel.shape[-1]
    if k % 2 != 1:
        raise ValueError("shifted_conv needs an odd kernel size")
    r = k // 2
    if r == 0:
        return T.conv2d(x, kernel)
    return T.conv2d(T.crop2d(x, 0, r, 0, 0), kernel, padding=(2 * r, r, r, r))


def directional_branch(x: Tensor, weights: BranchWeights, arch: ArchConfig, mode: str) -> Tensor:
    """``n_blocks`` of shifted conv, normalisation and leaky ReLU.

    Non-local layers follow every ``nonlocal_every``-th block.
    """
    if len(weights.kernels) != arch.n_blocks:
        raise ValueError(f"branch has {len(weights.kernels)} blocks, config says {arch.n_blocks}")
    if x.shape[1] != weights.kernels[0].shape[1]:
        raise ValueError("input channels do not match the first branch kernel")
    nl = 0
    for i in range(arch.n_blocks):
        x = shifted_conv(x, weights.kernels[i])
        x = T.norm_layer(x, weights.stats[i], weights.scales[i], weights.offsets[i], mode)
        x = T.leaky_relu(x, arch.slope)
        if arch.nonlocal_every and (i + 1) % arch.nonlocal_every == 0 and nl < len(weights.nonlocal_weights):
            x = T.masked_nonlocal(x, *weights.nonlocal_weights[nl], q=arch.nonlocal_q)
            nl += 1
    return x


def shape_blind_spot(branches: BranchFeatures, shape: BlindSpotShape) -> BranchFeatures:
    """Translate each half-plane map away from the centre by its shift."""
    if not isinstance(shape, BlindSpotShape):
        raise TypeError("shape must be a BlindSpotShape")
    return BranchFeatures(
        up=T.translate(branches.up, shape.up, 0),
        down=T.translate(branches.down, -shape.down, 0),
        left=T.translate(branches.left, 0, shape.left),
        right=T.translate(branches.right, 0, -shape.right),
    )


def merge_heads(branches: BranchFeatures, kernels: list[Tensor], biases: list[Tensor], slope: float = 0.1) -> Tensor:
    """Concatenate the four maps and fuse them with 1x1 convolutions.

    Returns a 2-channel map of raw (alpha, beta) values.
    """
    x = T.concat(branches.as_list(), axis=1)
    for i, (k, b) in enumerate(zip(kernels, biases)):
        if k.shape[1] != x.shape[1] or k.shape[2:] != (1, 1):
            raise ValueError(f"merge layer {i} expects {k.shape[1]} channels, got {x.shape[1]}")
        x = T.conv2d(x, k, bias=b)
        if i < len(kernels) - 1:
            x = T.leaky_relu(x, slope)
    return x


def positive_map(raw, floor: float = POSITIVE_FLOOR):
    """``floor + softplus(raw)`` for tensors or arrays."""
    if isinstance(raw, Tensor):
        return T.softplus_pos(raw, floor)
    return T.softplus_pos(Tensor(np.asarray(raw, dtype=np.float64)), floor).data


def _as_batch(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"expected an image or image batch, got shape {np.shape(img)}")
    return a


def forward_tensors(img, state: NetworkState, shape: BlindSpotShape = ONE_BY_ONE,
                    mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Tensor-level forward pass on ``img / input_scale``.

    Returns ``(alpha, beta)`` tensors of shape ``(B, 1, H, W)``; ``beta`` is
    in normalised units (divide observations by ``state.input_scale``).
    """
    y = _as_batch(img)
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValueError("input image must be finite and non-negative")
    arch = state.arch
    b = y.shape[0]
    x = Tensor((y / state.input_scale).astype(state.dtype))

    vin = T.concat([T.rot90(x, 0), T.rot90(x, 2)], axis=0)
    hin = T.concat([T.rot90(x, 1), T.rot90(x, 3)], axis=0)
    vout = directional_branch(vin, state.vertical, arch, mode)
    hout = directional_branch(hin, state.horizontal, arch, mode)
    feats = BranchFeatures(
        up=T.slice_axis(vout, 0, 0, b),
        down=T.rot90(T.slice_axis(vout, 0, b, 2 * b), 2),
        right=T.rot90(T.slice_axis(hout, 0, 0, b), 3),
        left=T.rot90(T.slice_axis(hout, 0, b, 2 * b), 1),
    )
    feats = shape_blind_spot(feats, shape)
    raw = merge_heads(feats, state.merge_kernels, state.merge_biases, arch.slope)
    alpha = positive_map(T.channel(raw, 0))
    beta = positive_map(T.channel(raw, 1))
    return alpha, beta


def forward(img, state: NetworkState, shape: BlindSpotShape = ONE_BY_ONE, mode: str = "eval") -> PriorField:
    """Per-pixel prior parameters for an image ``(H, W)`` or batch ``(B, H, W)``."""
    alpha, beta = forward_tensors(img, state, shape, mode)
    squeeze = np.ndim(img) == 2
    a = alpha.data[:, 0].astype(np.float64)
    bt = beta.data[:, 0].astype(np.float64) * state.input_scale
    if squeeze:
        a, bt = a[0], bt[0]
    return PriorField(a, bt)
