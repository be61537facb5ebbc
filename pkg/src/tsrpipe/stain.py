"""Stain-vector estimation and color normalization for H&E patches.

Optical density is ``OD = -log10(max(I, 1) / i0)`` per channel with
``i0 = 255``, so a fully transmissive pixel has OD 0 and stains combine
linearly (Beer-Lambert). The stain basis is estimated per image:

1. keep pixels whose every OD component exceeds ``beta``;
2. take the top-2 right singular directions of the kept OD vectors
   (eigenvectors of the uncentered 3x3 scatter matrix);
3. project the kept pixels onto that plane and measure angles about the
   mean projected direction (the cloud spans less than a half plane, so
   no branch-cut handling is needed);
4. the ``alpha`` and ``100 - alpha`` percentile angles, mapped back to
   3-space, sign-flipped into the nonnegative octant and unit-normalized,
   are the two stain columns;
5. the column with the larger red OD component is stain 1
   (hematoxylin-like).

Normalization solves per-pixel concentrations against the source basis via
the 2x2 normal equations, rescales so the source 99th-percentile
concentration of each stain maps onto the reference maximum, and rebuilds
intensities through the reference basis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientTissueError, SingularSystemError
from .raster import RgbImage

DEFAULT_I0 = 255.0
DEFAULT_BETA = 0.15
DEFAULT_ALPHA = 1.0
MAX_C_PERCENTILE = 99.0

# Columns closer than this are treated as a single stain.
_MIN_COLUMN_ANGLE_DEG = 1.0


@dataclass(frozen=True)
class StainMatrix:
    """3x2 optical-density stain basis; columns are unit-norm and nonnegative."""

    data: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.data, dtype=np.float64)
        if m.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {m.shape}")
        norms = np.linalg.norm(m, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError(f"columns must be unit norm, got norms {norms}")
        if np.any(m < 0):
            raise ValueError("columns must be nonnegative")
        if column_angle_deg(m) <= _MIN_COLUMN_ANGLE_DEG:
            raise ValueError("columns are parallel within tolerance")
        object.__setattr__(self, "data", m)

    @classmethod
    def from_columns(cls, stain1, stain2) -> "StainMatrix":
        """Build from raw column vectors: clamp tiny negatives, normalize."""
        cols = []
        for v in (stain1, stain2):
            v = np.asarray(v, dtype=np.float64).reshape(3)
            v = np.clip(v, 0.0, None)
            n = np.linalg.norm(v)
            if n == 0:
                raise ValueError("zero stain vector")
            cols.append(v / n)
        return cls(np.column_stack(cols))


def column_angle_deg(m: np.ndarray) -> float:
    c = float(np.dot(m[:, 0], m[:, 1]))
    c /= float(np.linalg.norm(m[:, 0]) * np.linalg.norm(m[:, 1]))
    return float(np.degrees(np.arccos(np.clip(abs(c), -1.0, 1.0))))


@dataclass(frozen=True)
class ReferenceProfile:
    """Normalization target: stain basis plus per-stain maximum concentration."""

    stain_matrix: StainMatrix
    max_concentrations: np.ndarray

    def __post_init__(self):
        mc = np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)
        if np.any(mc <= 0):
            raise ValueError("max_concentrations must be positive")
        object.__setattr__(self, "max_concentrations", mc)

    def to_json(self) -> str:
        m = self.stain_matrix.data
        return json.dumps({
            "stain1": list(m[:, 0]),
            "stain2": list(m[:, 1]),
            "max_c": list(self.max_concentrations),
        })

    @classmethod
    def from_json(cls, text: str) -> "ReferenceProfile":
        obj = json.loads(text)
        return cls(StainMatrix.from_columns(obj["stain1"], obj["stain2"]),
                   np.asarray(obj["max_c"], dtype=np.float64))

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceProfile":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def default_reference_profile() -> ReferenceProfile:
    """The de-facto standard H&E target basis and maxima."""
    return ReferenceProfile(
        StainMatrix.from_columns([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]),
        np.array([1.9705, 1.0308]),
    )


# ----------------------------------------------------------------------
# Optical density
# ----------------------------------------------------------------------

def rgb_to_od(img: RgbImage | np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Per-channel OD = -log10(max(I, 1) / i0) as float64 (h, w, 3)."""
    if i0 < 1:
        raise ValueError("i0 must be >= 1")
    data = img.data if isinstance(img, RgbImage) else np.asarray(img)
    return -np.log10(np.maximum(data.astype(np.float64), 1.0) / i0)


def od_to_rgb(od: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Inverse of rgb_to_od, rounded to uint8."""
    intensity = i0 * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.clip(np.floor(intensity + 0.5), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------
# Estimation and deconvolution
# ----------------------------------------------------------------------

def estimate_stain_matrix(od: np.ndarray,
                          beta: float = DEFAULT_BETA,
                          alpha: float = DEFAULT_ALPHA) -> StainMatrix:
    """Macenko-style stain basis from an OD image (or (n, 3) pixel list)."""
    pixels = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    kept = pixels[np.all(pixels > beta, axis=1)]
    if kept.shape[0] < 2:
        raise InsufficientTissueError(
            f"{kept.shape[0]} pixels above OD {beta}; need at least 2")

    scatter = kept.T @ kept
    eigvals, eigvecs = np.linalg.eigh(scatter)
    plane = eigvecs[:, [2, 1]]  # top-2 principal directions

    proj = kept @ plane
    mean_dir = proj.mean(axis=0)
    mean_norm = np.linalg.norm(mean_dir)
    if mean_norm == 0:
        raise InsufficientTissueError("degenerate projection: zero mean direction")
    e1 = mean_dir / mean_norm
    e2 = np.array([-e1[1], e1[0]])
    phi = np.arctan2(proj @ e2, proj @ e1)

    phi_lo = np.percentile(phi, alpha)
    phi_hi = np.percentile(phi, 100.0 - alpha)
    basis = np.column_stack((plane @ e1, plane @ e2))
    v_lo = basis @ np.array([np.cos(phi_lo), np.sin(phi_lo)])
    v_hi = basis @ np.array([np.cos(phi_hi), np.sin(phi_hi)])

    cols = []
    for v in (v_lo, v_hi):
        if v.sum() < 0:
            v = -v
        cols.append(v)
    angle = column_angle_deg(np.column_stack(cols))
    if angle <= _MIN_COLUMN_ANGLE_DEG:
        raise InsufficientTissueError(
            f"stain directions collapse (angle {angle:.3f} deg); single stain?")

    # Larger red OD component = hematoxylin-like = stain 1.
    if cols[0][0] >= cols[1][0]:
        return StainMatrix.from_columns(cols[0], cols[1])
    return StainMatrix.from_columns(cols[1], cols[0])


def concentrations(od: np.ndarray, m: StainMatrix | np.ndarray) -> np.ndarray:
    """Per-pixel least-squares stain concentrations, negatives clamped to 0.

    Solves the 2x2 normal equations of ``M c = od`` for every pixel; output
    shape is the input's spatial shape plus a trailing 2.
    """
    mat = m.data if isinstance(m, StainMatrix) else np.asarray(m, dtype=np.float64)
    if mat.shape != (3, 2):
        raise ValueError("stain matrix must be 3x2")
    if column_angle_deg(mat) <= _MIN_COLUMN_ANGLE_DEG:
        raise SingularSystemError("stain matrix columns are parallel within tolerance")

    od = np.asarray(od, dtype=np.float64)
    spatial = od.shape[:-1]
    pixels = od.reshape(-1, 3)

    a = mat.T @ mat
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) < 1e-12:
        raise SingularSystemError(f"normal equations singular (det {det:.3e})")
    b = pixels @ mat  # (n, 2)
    c0 = (a[1, 1] * b[:, 0] - a[0, 1] * b[:, 1]) / det
    c1 = (a[0, 0] * b[:, 1] - a[1, 0] * b[:, 0]) / det
    c = np.stack((c0, c1), axis=-1)
    return np.clip(c, 0.0, None).reshape(*spatial, 2)


def estimate_profile(img: RgbImage,
                     i0: float = DEFAULT_I0,
                     beta: float = DEFAULT_BETA,
                     alpha: float = DEFAULT_ALPHA) -> ReferenceProfile:
    """Source stain basis and 99th-percentile concentrations of an image."""
    od = rgb_to_od(img, i0)
    m = estimate_stain_matrix(od, beta, alpha)
    c = concentrations(od, m).reshape(-1, 2)
    max_c = np.percentile(c, MAX_C_PERCENTILE, axis=0)
    max_c = np.maximum(max_c, 1e-8)  # guard the later division
    return ReferenceProfile(m, max_c)


def apply_profile(img: RgbImage,
                  source: ReferenceProfile,
                  ref: ReferenceProfile,
                  i0: float = DEFAULT_I0) -> RgbImage:
    """Map an image from a fitted source profile onto the reference profile."""
    od = rgb_to_od(img, i0)
    c = concentrations(od, source.stain_matrix)
    scale = ref.max_concentrations / source.max_concentrations
    c_scaled = c * scale
    od_out = c_scaled @ ref.stain_matrix.data.T
    return RgbImage(od_to_rgb(od_out, i0), img.mpp)


def normalize(img: RgbImage,
              ref: ReferenceProfile | None = None,
              i0: float = DEFAULT_I0,
              beta: float = DEFAULT_BETA,
              alpha: float = DEFAULT_ALPHA,
              source: ReferenceProfile | None = None) -> RgbImage:
    """Normalize a patch to the reference stain profile.

    By default the source profile is fitted on the patch itself; pass
    ``source`` (fitted once per slide) for slide-level fitting.
    """
    if ref is None:
        ref = default_reference_profile()
    if source is None:
        source = estimate_profile(img, i0, beta, alpha)
    return apply_profile(img, source, ref, i0)
