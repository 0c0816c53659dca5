"""Binary checkpoint format.

Layout::

    8 bytes   magic  b"BSPKCKPT"
    4 bytes   little-endian uint32 N, length of the metadata text
    N bytes   UTF-8 metadata, one ``key=value`` per line
    ...       little-endian float32 blocks, in the order of the
              ``block.<i>=<name>:<shape>`` metadata lines

Metadata carries the format version, architecture config, rotation
convention, input scale, step counter and the normalisation running
statistics (as shortest round-trip decimal floats).  Weight blocks follow
:meth:`NetworkState.named_parameters` order, then optional Adam moment
blocks (``adam.m.<name>`` / ``adam.v.<name>``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import ROTATION_CONVENTION, ArchConfig, NetworkState, init_state

MAGIC = b"BSPKCKPT"
FORMAT_VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "MAGIC", "FORMAT_VERSION"]


class CheckpointError(ValueError):
    pass


def _fmt_floats(a: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(a, dtype=np.float32))


def _fmt_shape(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


def save_checkpoint(path, state: NetworkState, adam=None, extra: dict | None = None) -> Path:
    """Write ``state`` (and optionally an :class:`AdamState`) to ``path``."""
    path = Path(path)
    meta: list[tuple[str, str]] = [("format_version", str(FORMAT_VERSION))]
    for k, v in state.arch.as_dict().items():
        meta.append((f"arch.{k}", repr(v)))
    meta.append(("rotation", ROTATION_CONVENTION))
    meta.append(("input_scale", repr(float(state.input_scale))))
    meta.append(("step", str(int(state.step))))
    for name, st in state.named_stats():
        meta.append((f"stats.{name}.momentum", repr(float(st.momentum))))
        meta.append((f"stats.{name}.eps", repr(float(st.eps))))
        meta.append((f"stats.{name}.mean", _fmt_floats(st.mean)))
        meta.append((f"stats.{name}.var", _fmt_floats(st.var)))
    blocks: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in state.named_parameters()]
    if adam is not None:
        meta.append(("adam.step", str(int(adam.step))))
        meta.append(("adam.beta1", repr(float(adam.beta1))))
        meta.append(("adam.beta2", repr(float(adam.beta2))))
        meta.append(("adam.eps", repr(float(adam.eps))))
        names = [n for n, _ in state.named_parameters()]
        blocks += [(f"adam.m.{n}", m) for n, m in zip(names, adam.m)]
        blocks += [(f"adam.v.{n}", v) for n, v in zip(names, adam.v)]
    for k, v in sorted((extra or {}).items()):
        meta.append((f"extra.{k}", str(v)))
    meta.append(("blocks", str(len(blocks))))
    for i, (name, arr) in enumerate(blocks):
        meta.append((f"block.{i}", f"{name}:{_fmt_shape(arr.shape)}"))
    for k, v in meta:
        if "\n" in k or "\n" in v or "=" in k:
            raise CheckpointError(f"metadata entry {k!r} is not representable")
    text = "".join(f"{k}={v}\n" for k, v in meta).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


def read_metadata(path) -> tuple[dict[str, str], bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        text = raw[12 : 12 + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    meta = {}
    for line in text.splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    if int(meta.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta, raw[12 + n :]


def arch_from_meta(meta: dict[str, str]) -> ArchConfig:
    kw = {}
    for k, v in meta.items():
        if k.startswith("arch."):
            key = k[5:]
            kw[key] = float(v) if key == "slope" else int(v)
    return ArchConfig(**kw)


def load_checkpoint(path, dtype=np.float32):
    """Return ``(state, adam_or_None, metadata)``."""
    from .trainer import AdamState

    meta, payload = read_metadata(path)
    if meta.get("rotation") != ROTATION_CONVENTION:
        raise CheckpointError(f"{path}: rotation convention {meta.get('rotation')!r} unsupported")
    arch = arch_from_meta(meta)
    state = init_state(arch, seed=0, dtype=dtype, input_scale=float(meta["input_scale"]))
    state.step = int(meta["step"])
    for name, st in state.named_stats():
        st.momentum = float(meta[f"stats.{name}.momentum"])
        st.eps = float(meta[f"stats.{name}.eps"])
        st.mean[:] = np.array(meta[f"stats.{name}.mean"].split(","), dtype=np.float32)
        st.var[:] = np.array(meta[f"stats.{name}.var"].split(","), dtype=np.float32)

    arrays: dict[str, np.ndarray] = {}
    off = 0
    for i in range(int(meta["blocks"])):
        name, _, shp = meta[f"block.{i}"].rpartition(":")
        shape = tuple(int(s) for s in shp.split("x")) if shp else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated weight block {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
        off += nbytes
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing bytes")

    for name, t in state.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing weight block {name}")
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: block {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data = arrays[name].astype(dtype, copy=True)

    adam = None
    if "adam.step" in meta:
        names = [n for n, _ in state.named_parameters()]
        adam = AdamState(
            m=[arrays[f"adam.m.{n}"].astype(dtype, copy=True) for n in names],
            v=[arrays[f"adam.v.{n}"].astype(dtype, copy=True) for n in names],
            step=int(meta["adam.step"]),
            beta1=float(meta["adam.beta1"]),
            beta2=float(meta["adam.beta2"]),
            eps=float(meta["adam.eps"]),
        )
    return state, adam, meta
