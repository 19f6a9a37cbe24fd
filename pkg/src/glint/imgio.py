"""Float image I/O: Portable FloatMap (lossless) and 8-bit sRGB PNG previews."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported image files."""


@dataclass(frozen=True, eq=False)
class ImageF32:
    """Row-major float32 image, shape (height, width, channels), top row first."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 2, 3):
            raise ImageFormatError(f"expected (H, W, C) with C in 1..3, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _as_image(image) -> ImageF32:
    return image if isinstance(image, ImageF32) else ImageF32(image)


_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> ImageF32:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise ImageFormatError(f"{path}: malformed PFM header")
    channels = 3 if m.group(1) == b"PF" else 1
    width, height = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad scale field {m.group(4)!r}") from exc
    if scale == 0.0 or width == 0 or height == 0:
        raise ImageFormatError(f"{path}: zero scale or dimension")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    count = width * height * channels
    body = raw[m.end():]
    if len(body) < count * 4:
        raise ImageFormatError(f"{path}: short file ({len(body)} of {count * 4} bytes)")
    data = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    # PFM stores scanlines bottom-up.
    data = data.reshape(height, width, channels)[::-1]
    return ImageF32(np.ascontiguousarray(data))


def write_pfm(image, path) -> None:
    """Write little-endian PFM. Two-channel images are padded to three."""
    img = _as_image(image)
    data = img.data
    if not np.all(np.isfinite(data)):
        raise ImageFormatError("refusing to write non-finite values to PFM")
    if data.shape[2] == 2:
        data = np.concatenate([data, np.zeros_like(data[:, :, :1])], axis=2)
    tag = b"PF" if data.shape[2] == 3 else b"Pf"
    header = tag + b"\n%d %d\n-1.0\n" % (img.width, img.height)
    body = np.ascontiguousarray(data[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(linear, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def write_png(image, path, exposure: float = 1.0) -> None:
    img = _as_image(image)
    if img.channels not in (1, 3):
        raise ImageFormatError("PNG output needs 1 or 3 channels")
    encoded = srgb_encode(np.nan_to_num(img.data.astype(np.float64) * exposure))
    bytes8 = np.round(encoded * 255.0).astype(np.uint8)
    if img.channels == 3:
        bytes8 = bytes8[:, :, ::-1]  # OpenCV wants BGR
    else:
        bytes8 = bytes8[:, :, 0]
    if not cv2.imwrite(str(path), bytes8):
        raise OSError(f"failed to write {path}")


def read_png_rgb(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB PNG as floats in [0, 1], shape (H, W, 3)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: unreadable PNG")
    if raw.ndim != 3 or raw.shape[2] < 3:
        raise ImageFormatError(f"{path}: expected an RGB image")
    scale = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}.get(raw.dtype)
    if scale is None:
        raise ImageFormatError(f"{path}: unsupported bit depth {raw.dtype}")
    return raw[:, :, 2::-1].astype(np.float64) / scale
