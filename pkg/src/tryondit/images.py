"""Pixel-space image grids and binary PPM/PGM serialization.

Images are float64 arrays of shape (channels, height, width) with values
in [0, 1]. Color images round-trip through 8-bit binary PPM (P6); masks
and pose maps use binary PGM (P5).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class ImageGrid:
    """Normalized-intensity image, channels-first."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ShapeError(f"ImageGrid requires (1|3, H, W), got {arr.shape}")
        self.values = arr

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def validate_range(self) -> "ImageGrid":
        lo, hi = self.values.min(), self.values.max()
        if lo < 0.0 or hi > 1.0:
            raise ShapeError(f"image values outside [0,1]: min={lo}, max={hi}")
        return self

    def clamped(self) -> "ImageGrid":
        return ImageGrid(np.clip(self.values, 0.0, 1.0))

    def copy(self) -> "ImageGrid":
        return ImageGrid(self.values.copy())


def quantize(img: ImageGrid) -> np.ndarray:
    """8-bit quantization used for all file emission (round-half-up-even)."""
    return np.clip(np.rint(img.values * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | os.PathLike, img: ImageGrid) -> None:
    """Write P6 (3-channel) or P5 (1-channel), 8-bit, maxval 255."""
    bytes8 = quantize(img)
    if img.channels == 3:
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        payload = bytes8.transpose(1, 2, 0).tobytes()
    else:
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        payload = bytes8[0].tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _read_token(raw: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(raw) and raw[pos:pos + 1].isspace():
        pos += 1
    if raw[pos:pos + 1] == b"#":
        while pos < len(raw) and raw[pos] != 0x0A:
            pos += 1
        return _read_token(raw, pos)
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace():
        pos += 1
    return raw[start:pos], pos


def read_image(path: str | os.PathLike) -> ImageGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, pos = _read_token(raw, 0)
    if magic not in (b"P5", b"P6"):
        raise ShapeError(f"{path}: unsupported netpbm magic {magic!r}")
    width_b, pos = _read_token(raw, pos)
    height_b, pos = _read_token(raw, pos)
    maxval_b, pos = _read_token(raw, pos)
    width, height, maxval = int(width_b), int(height_b), int(maxval_b)
    if maxval != 255:
        raise ShapeError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=pos)
    if channels == 3:
        arr = data.reshape(height, width, 3).transpose(2, 0, 1)
    else:
        arr = data.reshape(1, height, width)
    return ImageGrid(arr.astype(np.float64) / 255.0)
