"""Sliding-window patch extraction.

Two modes mirror the two pipeline stages:

* ``tile_annotated``: overlapping windows over an annotated slide (default a
  64-pixel shared band between neighbors, i.e. stride 160 for 224 patches),
  labeled through the 75% coverage rule; used to build training corpora.
* ``tile_masked``: non-overlapping windows gated by tissue-mask coverage;
  used for TSR inference where no annotations exist.

Windows that would extend past the slide are skipped (no padding), and the
output is row-major by (y, x). Kept patches are Macenko-normalized unless
the config disables it; a patch whose normalization fails is kept raw with
``normalized=False`` so downstream counts are not silently biased.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stain
from .annotate import TissueClass, patch_label, LABEL_RULE_SINGLE
from .errors import DimensionMismatchError, InsufficientTissueError, SingularSystemError
from .raster import Rect, RgbImage, coverage, read_image, write_image

PATCH_SIZE = 224
ANNOTATED_OVERLAP = 64

MANIFEST_HEADER = ["slide_id", "x", "y", "w", "h", "label"]


@dataclass(frozen=True)
class TilingConfig:
    patch_size: int = PATCH_SIZE
    overlap: int = ANNOTATED_OVERLAP
    min_coverage: float = 0.75
    normalize: bool = True
    stride: int | None = None  # explicit override of patch_size - overlap

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if not 0 <= self.overlap < self.patch_size:
            raise ValueError("overlap must satisfy 0 <= overlap < patch_size")
        if not 0 < self.min_coverage <= 1:
            raise ValueError("min_coverage must be in (0, 1]")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else self.patch_size - self.overlap


def masked_config(cfg: TilingConfig | None = None, **overrides) -> TilingConfig:
    """A TilingConfig for masked (non-overlapping) tiling."""
    base = cfg or TilingConfig(overlap=0, stride=None)
    return TilingConfig(
        patch_size=overrides.get("patch_size", base.patch_size),
        overlap=0,
        min_coverage=overrides.get("min_coverage", base.min_coverage),
        normalize=overrides.get("normalize", base.normalize),
        stride=None,
    )


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    rect: Rect
    label: TissueClass | None
    pixels: RgbImage
    normalized: bool

    @property
    def patch_id(self) -> str:
        return f"{self.slide_id}_{self.rect[0]}_{self.rect[1]}"


def grid_origins(extent: int, patch: int, stride: int) -> list[int]:
    """Window origins k*stride with the window fully inside [0, extent)."""
    return list(range(0, extent - patch + 1, stride)) if extent >= patch else []


def _normalizer(cfg: TilingConfig, reference, source_profile):
    if not cfg.normalize:
        return lambda img: (img, False)

    ref = reference or stain.default_reference_profile()

    def run(img: RgbImage) -> tuple[RgbImage, bool]:
        try:
            return stain.normalize(img, ref, source=source_profile), True
        except (InsufficientTissueError, SingularSystemError):
            return img, False

    return run


def tile_annotated(img: RgbImage, labelmap: np.ndarray, cfg: TilingConfig,
                   slide_id: str = "slide",
                   reference: "stain.ReferenceProfile | None" = None,
                   label_rule: str = LABEL_RULE_SINGLE,
                   source_profile: "stain.ReferenceProfile | None" = None) -> list[PatchRecord]:
    """Overlapping labeled tiling of an annotated slide."""
    if labelmap.shape[:2] != (img.height, img.width):
        raise DimensionMismatchError(
            f"label map {labelmap.shape} vs image {img.height}x{img.width}")
    stride = cfg.effective_stride
    normalize = _normalizer(cfg, reference, source_profile)

    records = []
    for y in grid_origins(img.height, cfg.patch_size, stride):
        for x in grid_origins(img.width, cfg.patch_size, stride):
            rect = (x, y, cfg.patch_size, cfg.patch_size)
            label = patch_label(labelmap, rect, cfg.min_coverage, label_rule)
            if label is None:
                continue
            pixels, normalized = normalize(img.crop(rect))
            records.append(PatchRecord(slide_id, rect, label, pixels, normalized))
    return records


def tile_masked(img: RgbImage, mask: np.ndarray, cfg: TilingConfig,
                slide_id: str = "slide",
                reference: "stain.ReferenceProfile | None" = None,
                source_profile: "stain.ReferenceProfile | None" = None) -> list[PatchRecord]:
    """Non-overlapping tiling gated by mask coverage; labels are None."""
    if mask.shape[:2] != (img.height, img.width):
        raise DimensionMismatchError(
            f"mask {mask.shape} vs image {img.height}x{img.width}")
    if cfg.effective_stride != cfg.patch_size:
        raise ValueError("tile_masked requires non-overlapping windows (overlap 0, no stride override)")
    normalize = _normalizer(cfg, reference, source_profile)

    records = []
    for y in grid_origins(img.height, cfg.patch_size, cfg.patch_size):
        for x in grid_origins(img.width, cfg.patch_size, cfg.patch_size):
            rect = (x, y, cfg.patch_size, cfg.patch_size)
            if coverage(mask, rect) < cfg.min_coverage:
                continue
            pixels, normalized = normalize(img.crop(rect))
            records.append(PatchRecord(slide_id, rect, None, pixels, normalized))
    return records


# ----------------------------------------------------------------------
# Manifest output: one CSV plus one PPM per patch
# ----------------------------------------------------------------------

def write_patches(records: list[PatchRecord], out_dir: str | Path,
                  manifest_name: str = "manifest.csv") -> Path:
    """Write `<slide_id>_<x>_<y>.ppm` per patch plus the manifest CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            x, y, w, h = r.rect
            label = r.label.label_name if r.label is not None else ""
            writer.writerow([r.slide_id, x, y, w, h, label])
            write_image(out_dir / f"{r.patch_id}.ppm", r.pixels, sidecar=False)
    return manifest


def read_patches(manifest_path: str | Path) -> list[PatchRecord]:
    """Load patches written by write_patches (pixels read eagerly)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            rect = (int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"]))
            label = TissueClass.from_name(row["label"]) if row["label"] else None
            slide_id = row["slide_id"]
            pixels = read_image(base / f"{slide_id}_{rect[0]}_{rect[1]}.ppm")
            records.append(PatchRecord(slide_id, rect, label, pixels, normalized=True))
    return records
