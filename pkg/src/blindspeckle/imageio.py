"""Grayscale raster I/O.

Reads 8/16-bit graymap (PGM) and PNG files into float intensities in
[0, 255]; colour inputs are reduced with the 0.299/0.587/0.114 luminance
weights.  Sixteen-bit data is rescaled linearly so the format maximum (the
PGM ``maxval`` header, 65535 for PNG) maps to 255.  Graymaps are decoded
here rather than by Pillow so that scaling stays explicit.

Raw float files (``.raw``/``.f32``) carry an ASCII ``"H W\\n"`` header line
followed by little-endian float32 samples in row-major order; they are the
lossless exchange format for metric computation.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageFormatError",
    "load_grayscale",
    "save_grayscale",
    "read_raw_float",
    "write_raw_float",
    "read_image",
    "write_image",
    "RAW_SUFFIXES",
]

RAW_SUFFIXES = (".raw", ".f32")
LUMA = (0.299, 0.587, 0.114)
_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


class ImageFormatError(ValueError):
    pass


def _read_pgm(path: Path) -> np.ndarray | None:
    """Decode P2/P5 graymaps directly so the ``maxval`` scaling is explicit."""
    raw = path.read_bytes()
    if raw[:2] not in (b"P2", b"P5"):
        return None
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated graymap header")
        tokens.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed graymap header") from exc
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: zero-size image")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid maxval {maxval}")
    if raw[:2] == b"P5":
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = raw[pos + 1 : pos + 1 + h * w * dt.itemsize]
        if len(body) != h * w * dt.itemsize:
            raise ImageFormatError(f"{path}: truncated raster")
        data = np.frombuffer(body, dtype=dt).astype(np.float64)
    else:
        data = np.array(raw[pos:].split()[: h * w], dtype=np.float64)
        if data.size != h * w:
            raise ImageFormatError(f"{path}: truncated raster")
    data = data.reshape(h, w)
    return data if maxval == 255 else data * (255.0 / maxval)


def load_grayscale(path) -> np.ndarray:
    """Decode a grayscale or colour raster to float64 intensities in [0, 255]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    pgm = _read_pgm(path)
    if pgm is not None:
        return pgm
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: unsupported or corrupt image") from exc
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc
    if arr.size == 0:
        raise ImageFormatError(f"{path}: zero-size image")

    if mode == "1":
        return arr.astype(np.float64) * 255.0
    if mode in ("L", "LA"):
        out = arr[..., 0] if arr.ndim == 3 else arr
        return out.astype(np.float64)
    if mode in ("RGB", "RGBA"):
        rgb = arr[..., :3].astype(np.float64)
        return rgb @ np.array(LUMA)
    if mode.startswith("I"):
        return arr.astype(np.float64) * (255.0 / 65535.0)
    if mode == "F":
        return arr.astype(np.float64)
    raise ImageFormatError(f"{path}: unsupported pixel mode {mode}")


def save_grayscale(path, img, bits: int = 8) -> Path:
    """Quantise to 8 or 16 bits and write; format follows the suffix."""
    path = Path(path)
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D image")
    a = np.clip(np.nan_to_num(a, nan=0.0), 0.0, 255.0)
    if bits == 8:
        im = Image.fromarray(np.rint(a).astype(np.uint8), mode="L")
    elif bits == 16:
        im = Image.fromarray(np.rint(a * (65535.0 / 255.0)).astype(np.uint16))
    else:
        raise ValueError("bits must be 8 or 16")
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else None
    im.save(path, format=fmt)
    return path


def write_raw_float(path, img) -> Path:
    path = Path(path)
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("expected a 2-D image")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{a.shape[0]} {a.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def read_raw_float(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    try:
        h, w = (int(t) for t in raw[:nl].split())
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad raw float header") from exc
    body = raw[nl + 1 :]
    if h <= 0 or w <= 0:
        raise ImageFormatError(f"{path}: zero-size image")
    if len(body) != 4 * h * w:
        raise ImageFormatError(f"{path}: expected {4 * h * w} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        return read_raw_float(path)
    return load_grayscale(path)


def write_image(path, img, bits: int = 8) -> Path:
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        return write_raw_float(path, img)
    return save_grayscale(path, img, bits)
