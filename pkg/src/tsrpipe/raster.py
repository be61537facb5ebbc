"""Raster buffers, a binary PPM codec, grayscale conversion, Otsu thresholding
and tissue masking.

Conventions used throughout the package:

* ``RgbImage`` wraps a ``uint8`` array of shape ``(height, width, 3)`` plus the
  physical pixel pitch in microns per pixel (default 0.5).
* Grayscale images, masks and label maps are bare numpy arrays:
  ``uint8 (h, w)``, ``bool (h, w)`` and ``uint8 (h, w)`` respectively.
* Rectangles are ``(x, y, w, h)`` tuples in pixel coordinates.

The image container is binary PPM (P6, maxval 255) with an optional JSON
sidecar ``<stem>.meta.json`` holding ``{"mpp": <float>}``; the format is
codec-free and bit-exact, which keeps slide fixtures reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import (
    DegenerateHistogramError,
    MalformedHeaderError,
    MalformedJsonError,
    RectOutOfBoundsError,
    TruncatedDataError,
    UnsupportedMaxvalError,
)

DEFAULT_MPP = 0.5

# ITU-R BT.601 luma weights; the conversion rounds half up.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

Rect = tuple[int, int, int, int]


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB raster with physical resolution metadata."""

    data: np.ndarray
    mpp: float = DEFAULT_MPP

    def __post_init__(self):
        d = self.data
        if not isinstance(d, np.ndarray) or d.dtype != np.uint8 or d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"RgbImage.data must be uint8 (h, w, 3), got {getattr(d, 'shape', None)}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("RgbImage must be at least 1x1")
        if self.mpp <= 0:
            raise ValueError("mpp must be positive")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def crop(self, rect: Rect) -> "RgbImage":
        x, y, w, h = check_rect(rect, self.width, self.height)
        return RgbImage(self.data[y:y + h, x:x + w].copy(), self.mpp)


def check_rect(rect: Rect, width: int, height: int) -> Rect:
    """Validate that rect lies fully inside a width x height raster."""
    x, y, w, h = (int(v) for v in rect)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise RectOutOfBoundsError(f"rect {rect} outside raster {width}x{height}")
    return x, y, w, h


# ----------------------------------------------------------------------
# PPM (P6) codec
# ----------------------------------------------------------------------

def _read_header_token(f: BinaryIO) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        c = f.read(1)
        if c == b"":
            raise MalformedHeaderError("unexpected end of file in header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if token:
                return token
            continue
        token += c


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def read_image(path: str | Path) -> RgbImage:
    """Decode a binary PPM (P6, maxval 255); mpp comes from the sidecar if present."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise MalformedHeaderError(f"expected magic 'P6', got {magic!r}")
        try:
            width = int(_read_header_token(f))
            height = int(_read_header_token(f))
            maxval = int(_read_header_token(f))
        except ValueError as e:
            raise MalformedHeaderError(f"non-numeric header field: {e}") from e
        if width < 1 or height < 1:
            raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
        if maxval != 255:
            raise UnsupportedMaxvalError(f"maxval {maxval}; only 255 supported")
        payload = f.read(width * height * 3)
    if len(payload) < width * height * 3:
        raise TruncatedDataError(
            f"expected {width * height * 3} pixel bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()

    mpp = DEFAULT_MPP
    meta = _meta_path(path)
    if meta.exists():
        try:
            mpp = float(json.loads(meta.read_text(encoding="utf-8"))["mpp"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise MalformedJsonError(f"bad sidecar {meta}: {e}") from e
    return RgbImage(data, mpp)


def write_image(path: str | Path, img: RgbImage, sidecar: bool = True) -> None:
    """Write a binary PPM plus (by default) the mpp sidecar."""
    path = Path(path)
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.data.tobytes())
    if sidecar:
        _meta_path(path).write_text(json.dumps({"mpp": img.mpp}), encoding="utf-8")


# ----------------------------------------------------------------------
# Grayscale, histogram, Otsu
# ----------------------------------------------------------------------

def to_grayscale(img: RgbImage) -> np.ndarray:
    """BT.601 luminance, rounded half up, as uint8 (h, w)."""
    lum = img.data.astype(np.float64) @ _LUMA_WEIGHTS
    return np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8)


def histogram256(gray: np.ndarray) -> np.ndarray:
    """256-bin luminance histogram (int64 counts)."""
    if gray.dtype != np.uint8:
        raise ValueError("histogram256 expects a uint8 image")
    return np.bincount(gray.ravel(), minlength=256).astype(np.int64)


def otsu_threshold(hist: np.ndarray) -> int:
    """Smallest t in [0, 255] maximizing between-class variance.

    Class 0 holds levels <= t, class 1 levels > t. Raises
    DegenerateHistogramError when fewer than two bins are populated.
    """
    h = np.asarray(hist, dtype=np.float64)
    if h.shape != (256,):
        raise ValueError("histogram must have 256 bins")
    if np.any(h < 0):
        raise ValueError("histogram counts must be nonnegative")
    if np.count_nonzero(h) < 2:
        raise DegenerateHistogramError("all mass in a single bin")

    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(h)
    s0 = np.cumsum(h * levels)
    total, s_total = w0[-1], s0[-1]
    w1 = total - w0

    valid = (w0 > 0) & (w1 > 0)
    sigma_b = np.zeros(256)
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=valid)
    mu1 = np.divide(s_total - s0, w1, out=np.zeros(256), where=valid)
    sigma_b[valid] = (w0 * w1)[valid] * (mu0 - mu1)[valid] ** 2
    return int(np.argmax(sigma_b))  # first maximum = smallest threshold


def tissue_mask(img: RgbImage) -> np.ndarray:
    """Boolean mask, true where tissue: pixels in Otsu's dark class
    (luminance <= threshold; tissue is darker than background/adipose on H&E)."""
    gray = to_grayscale(img)
    t = otsu_threshold(histogram256(gray))
    return gray <= t


def coverage(raster: np.ndarray, rect: Rect) -> float:
    """Fraction of rect pixels that are true (mask) or nonzero (label map)."""
    if raster.ndim != 2:
        raise ValueError("coverage expects a 2-D mask or label map")
    x, y, w, h = check_rect(rect, raster.shape[1], raster.shape[0])
    region = raster[y:y + h, x:x + w]
    if raster.dtype == bool:
        return float(np.count_nonzero(region)) / (w * h)
    return float(np.count_nonzero(region != 0)) / (w * h)
