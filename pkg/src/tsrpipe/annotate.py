"""Pathologist-annotation ingestion and rasterization to per-pixel labels.

Annotation files are JSON:
``{"polygons": [{"class": "tumor"|"stroma"|"other", "ring": [[x, y], ...]}, ...]}``
with vertices in native slide pixel coordinates. Rings are implicitly
closed. Rasterization samples each pixel at its center ``(x + 0.5, y + 0.5)``
with the even-odd rule; later polygons overwrite earlier ones, and
unannotated pixels stay 0.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegeneratePolygonError,
    MalformedJsonError,
    UnknownClassNameError,
)
from .raster import Rect, check_rect

UNLABELED = 0


class TissueClass(enum.IntEnum):
    TUMOR = 1
    STROMA = 2
    OTHER = 3

    @classmethod
    def from_name(cls, name: str) -> "TissueClass":
        try:
            return _NAME_TO_CLASS[name]
        except KeyError:
            raise UnknownClassNameError(
                f"unknown class {name!r}; expected one of {sorted(_NAME_TO_CLASS)}"
            ) from None

    @property
    def label_name(self) -> str:
        return self.name.lower()


_NAME_TO_CLASS = {c.name.lower(): c for c in TissueClass}

CLASS_ORDER = (TissueClass.TUMOR, TissueClass.STROMA, TissueClass.OTHER)


@dataclass(frozen=True)
class AnnotationPolygon:
    tissue_class: TissueClass
    ring: np.ndarray  # (n, 2) float64, n >= 3, implicitly closed

    def __post_init__(self):
        r = np.asarray(self.ring, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != 2 or r.shape[0] < 3:
            raise DegeneratePolygonError(
                f"ring must be at least 3 (x, y) vertices, got shape {r.shape}")
        object.__setattr__(self, "ring", r)


@dataclass(frozen=True)
class Annotation:
    polygons: tuple[AnnotationPolygon, ...]


def parse_annotations(path: str | Path) -> Annotation:
    """Load and validate an annotation JSON file."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedJsonError(f"{path}: {e}") from e
    return annotation_from_obj(obj, context=str(path))


def annotation_from_obj(obj, context: str = "<annotation>") -> Annotation:
    if not isinstance(obj, dict) or not isinstance(obj.get("polygons"), list):
        raise MalformedJsonError(f"{context}: expected object with a 'polygons' list")
    polygons = []
    for i, entry in enumerate(obj["polygons"]):
        if not isinstance(entry, dict) or "class" not in entry or "ring" not in entry:
            raise MalformedJsonError(f"{context}: polygon {i} missing 'class' or 'ring'")
        cls = TissueClass.from_name(entry["class"])
        ring = entry["ring"]
        if not isinstance(ring, list) or len(ring) < 3:
            raise DegeneratePolygonError(
                f"{context}: polygon {i} has {len(ring) if isinstance(ring, list) else '?'} vertices")
        try:
            ring_arr = np.asarray(ring, dtype=np.float64)
        except ValueError as e:
            raise MalformedJsonError(f"{context}: polygon {i} has non-numeric vertices") from e
        polygons.append(AnnotationPolygon(cls, ring_arr))
    return Annotation(tuple(polygons))


def annotation_to_obj(a: Annotation) -> dict:
    return {"polygons": [
        {"class": p.tissue_class.label_name, "ring": [[float(x), float(y)] for x, y in p.ring]}
        for p in a.polygons
    ]}


def write_annotations(path: str | Path, a: Annotation) -> None:
    Path(path).write_text(json.dumps(annotation_to_obj(a)), encoding="utf-8")


# ----------------------------------------------------------------------
# Rasterization
# ----------------------------------------------------------------------

def _fill_even_odd(lm: np.ndarray, ring: np.ndarray, value: int) -> None:
    """Scanline even-odd fill at pixel centers.

    A center (px, py) is inside iff the number of edge crossings with
    x-intersection strictly left of px is odd; edges count a scanline when
    ymin <= py < ymax (half-open), which resolves vertex ties.
    """
    height, width = lm.shape
    ys = ring[:, 1]
    y_lo = max(0, math.floor(ys.min() - 0.5))
    y_hi = min(height - 1, math.ceil(ys.max()))
    x1s, y1s = ring[:, 0], ring[:, 1]
    x2s, y2s = np.roll(ring[:, 0], -1), np.roll(ring[:, 1], -1)

    for y in range(y_lo, y_hi + 1):
        yc = y + 0.5
        crossing = ((y1s <= yc) & (yc < y2s)) | ((y2s <= yc) & (yc < y1s))
        if not crossing.any():
            continue
        t = (yc - y1s[crossing]) / (y2s[crossing] - y1s[crossing])
        xs = np.sort(x1s[crossing] + t * (x2s[crossing] - x1s[crossing]))
        for k in range(0, len(xs) - 1, 2):
            # centers strictly right of xs[k] and at most xs[k+1]
            x_start = math.floor(xs[k] - 0.5) + 1
            x_end = math.floor(xs[k + 1] - 0.5)
            if x_end < 0 or x_start > width - 1:
                continue
            lm[y, max(0, x_start):min(width - 1, x_end) + 1] = value


def rasterize(a: Annotation, width: int, height: int) -> np.ndarray:
    """Label map uint8 (height, width); later polygons overwrite earlier ones."""
    lm = np.zeros((height, width), dtype=np.uint8)
    for poly in a.polygons:
        _fill_even_odd(lm, poly.ring, int(poly.tissue_class))
    return lm


# ----------------------------------------------------------------------
# Patch labeling
# ----------------------------------------------------------------------

LABEL_RULE_SINGLE = "single-class"
LABEL_RULE_MAJORITY = "any-annotated-majority"


def patch_label(lm: np.ndarray, rect: Rect,
                min_cov: float = 0.75,
                rule: str = LABEL_RULE_SINGLE) -> TissueClass | None:
    """Class of a window, or None (discard) when coverage is insufficient.

    ``single-class``: a single class must cover >= min_cov of the window.
    ``any-annotated-majority``: annotated pixels of any class must cover
    >= min_cov; the majority class wins (ties to the lowest class value).
    """
    if lm.ndim != 2:
        raise ValueError("patch_label expects a 2-D label map")
    x, y, w, h = check_rect(rect, lm.shape[1], lm.shape[0])
    counts = np.bincount(lm[y:y + h, x:x + w].ravel(), minlength=4)[:4]
    area = w * h

    if rule == LABEL_RULE_SINGLE:
        class_counts = counts[1:4]
        best = int(np.argmax(class_counts))  # ties -> lowest class value
        if class_counts[best] / area >= min_cov:
            return TissueClass(best + 1)
        return None
    if rule == LABEL_RULE_MAJORITY:
        annotated = area - counts[UNLABELED]
        if annotated / area < min_cov:
            return None
        best = int(np.argmax(counts[1:4]))
        return TissueClass(best + 1)
    raise ValueError(f"unknown label rule {rule!r}")
