"""Image/map containers, PNG and FMAP I/O, patch geometry and false color."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

PATCH = 32
FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sIIII12x")

# Rec.709 luma
LUMA = np.array([0.2126, 0.7152, 0.0722])

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


class ImageIOError(ValueError):
    """Unreadable or malformed image / map file."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x C raster in [0, 1]. ``data`` is read-only float64."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image has non-finite samples")
        a = np.clip(a, 0.0, 1.0)
        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(a)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def luma(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[..., 0]
        return self.data @ LUMA


@dataclass(frozen=True, eq=False)
class ResponseMap:
    """Single-channel non-negative map, stored as float32 so FMAP round-trips are exact."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 3 and a.shape[2] == 1:
            a = a[..., 0]
        if a.ndim != 2:
            raise ValueError(f"response map must be 2-D, got {a.shape}")
        a = np.ascontiguousarray(a, dtype=np.float32)
        if not np.all(np.isfinite(a)):
            raise ValueError("response map has non-finite values")
        if np.any(a < 0):
            raise ValueError("response map has negative values")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def mean(self) -> float:
        return float(self.data.mean(dtype=np.float64))


@dataclass(frozen=True)
class PatchRect:
    x: int
    y: int
    size: int = PATCH

    def slices(self):
        return slice(self.y, self.y + self.size), slice(self.x, self.x + self.size)

    def inside(self, width: int, height: int) -> bool:
        return 0 <= self.x and 0 <= self.y and self.x + self.size <= width and self.y + self.size <= height


def as_array(img) -> np.ndarray:
    """Raw ndarray behind an Image/ResponseMap, or the argument itself."""
    return img.data if isinstance(img, (Image, ResponseMap)) else np.asarray(img)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def _png_header(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIG or head[12:16] != b"IHDR":
        raise ImageIOError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    return bit_depth, color_type


def load_image(path) -> Image:
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: no such file")
    bit_depth, color_type = _png_header(path)
    if bit_depth not in (8, 16):
        raise ImageIOError(f"{path}: unsupported bit depth {bit_depth} (need 8 or 16)")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageIOError(f"{path}: unreadable PNG")
    scale = float(np.iinfo(raw.dtype).max)
    if raw.ndim == 2:
        data = raw[..., None]
    elif color_type == 4:  # gray + alpha, decoded as BGRA
        data = raw[..., :1]
    else:
        data = raw[..., 2::-1]  # BGR(A) -> RGB, alpha dropped
    return Image(data.astype(np.float64) / scale)


def save_image(img, path, bits: int = 8) -> None:
    a = as_array(img)
    if a.ndim == 2:
        a = a[..., None]
    if bits == 8:
        q = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    elif bits == 16:
        q = np.round(np.clip(a, 0, 1) * 65535).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    if q.shape[2] == 3:
        q = q[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise ImageIOError(f"{path}: could not write PNG")


# ---------------------------------------------------------------------------
# FMAP
# ---------------------------------------------------------------------------


def write_fmap(path, array) -> None:
    """Write a H x W (x C) float array as FMAP (little-endian f32)."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError("FMAP payload must be 2-D or 3-D")
    h, w, c = a.shape
    if not np.all(np.isfinite(a)):
        raise ValueError("FMAP payload must be finite")
    header = _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, w, h, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    """Read an FMAP file into a float32 H x W x C array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FMAP_HEADER.size:
        raise ImageIOError(f"{path}: truncated FMAP header")
    magic, version, w, h, c = _FMAP_HEADER.unpack_from(blob)
    if magic != FMAP_MAGIC:
        raise ImageIOError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise ImageIOError(f"{path}: unsupported FMAP version {version}")
    count = w * h * c
    if count >= 2**31:
        raise ImageIOError(f"{path}: dimensions {w}x{h}x{c} overflow")
    expected = _FMAP_HEADER.size + 4 * count
    if len(blob) != expected:
        raise ImageIOError(f"{path}: payload is {len(blob) - _FMAP_HEADER.size} bytes, expected {4 * count}")
    data = np.frombuffer(blob, dtype="<f4", offset=_FMAP_HEADER.size).astype(np.float32)
    return data.reshape(h, w, c)


def save_float_map(m: ResponseMap, path) -> None:
    write_fmap(path, m.data)


def load_float_map(path) -> ResponseMap:
    a = read_fmap(path)
    if a.shape[2] != 1:
        raise ImageIOError(f"{path}: response maps are single-channel, file has {a.shape[2]}")
    return ResponseMap(a[..., 0])


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# false color
# ---------------------------------------------------------------------------

# blue -> green -> yellow -> red, evenly spaced
RAMP = np.array(
    [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ]
)
RAMP_STOPS = np.linspace(0.0, 1.0, len(RAMP))


def ramp_position(values, lo: float, hi: float) -> np.ndarray:
    """Position in [0, 1] along the color ramp (the monotone hue index)."""
    if not lo < hi:
        raise ValueError(f"false color range needs lo < hi, got [{lo}, {hi}]")
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def ramp_color(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.stack([np.interp(t, RAMP_STOPS, RAMP[:, k]) for k in range(3)], axis=-1)


def false_color(m, lo: float, hi: float) -> Image:
    return Image(ramp_color(ramp_position(as_array(m), lo, hi)))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def enumerate_patches(img, stride: int, size: int = PATCH) -> list[PatchRect]:
    a = as_array(img)
    h, w = a.shape[:2]
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} is smaller than a {size}x{size} patch")
    return [PatchRect(x, y, size) for y in range(0, h - size + 1, stride) for x in range(0, w - size + 1, stride)]


def extract_patches(img, rects) -> np.ndarray:
    """Stack the pixels under ``rects`` into an (N, size, size, C) float32 array."""
    a = as_array(img)
    if not rects:
        return np.zeros((0, PATCH, PATCH, a.shape[2] if a.ndim == 3 else 1), dtype=np.float32)
    return np.stack([a[r.slices()] for r in rects]).astype(np.float32)
