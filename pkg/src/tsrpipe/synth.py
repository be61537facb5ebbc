"""Seed-deterministic synthetic slides and patch corpora.

Patches are rendered as concentration fields of two stains and converted to
RGB through a known stain basis (I = i0 * 10**(-M @ c)), so stain-module
recovery is oracle-checkable. The three tissue classes get visually and
statistically distinct procedural textures:

* tumor: stain-1-heavy gaussian blobs on a stain-1-leaning base;
* stroma: stain-2-heavy oriented stripes;
* other: block speckle mixing both stains.

Concentration floors keep every tissue pixel below luminance 200 while the
background stays pure white, which guarantees Otsu separability, and they
keep enough optical density in all channels for per-patch stain estimation
to succeed.

Slides are assembled from whole 224-pixel grid cells with a background
margin ring, so the non-overlapping tile grid reproduces the generator's
tumor/stroma cell counts exactly: ground-truth TSR is grid-exact.

All randomness flows through the documented SplitMix64 generator in
``tsrpipe.rng``; identical seeds give bit-identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .annotate import Annotation, AnnotationPolygon, TissueClass
from .cohort import LabeledPatch
from .errors import InfeasibleLayoutError
from .raster import Rect, RgbImage
from .rng import SplitMix64, derive_seed
from .stain import StainMatrix, default_reference_profile
from .tiler import PATCH_SIZE


def _default_stain_matrix() -> np.ndarray:
    return default_reference_profile().stain_matrix.data.copy()


@dataclass(frozen=True)
class TextureParams:
    """Procedural texture knobs; defaults are tuned for class separability."""

    patch_size: int = PATCH_SIZE
    stain_matrix: np.ndarray = field(default_factory=_default_stain_matrix)
    i0: float = 255.0
    # tumor: blobs of stain 1
    tumor_base: tuple[float, float] = (0.55, 0.35)
    tumor_blob_count: tuple[int, int] = (18, 28)
    tumor_blob_sigma: tuple[float, float] = (8.0, 16.0)
    tumor_blob_amp: tuple[float, float] = (0.9, 1.5)
    # stroma: stripes of stain 2
    stroma_base: tuple[float, float] = (0.36, 0.50)
    stripe_period: tuple[float, float] = (24.0, 40.0)
    stripe_amp: tuple[float, float] = (0.9, 1.3)
    # other: block speckle of both stains
    speckle_block: int = 16
    speckle_range: tuple[float, float] = (0.45, 1.15)


def concentrations_to_rgb(c: np.ndarray, m: np.ndarray, i0: float = 255.0) -> np.ndarray:
    """Forward Beer-Lambert synthesis: uint8 image from (h, w, 2) concentrations."""
    od = c @ np.asarray(m, dtype=np.float64).T
    intensity = i0 * np.power(10.0, -od)
    return np.clip(np.floor(intensity + 0.5), 0, 255).astype(np.uint8)


def _blocky_field(rng: SplitMix64, size: int, block: int, lo: float, hi: float) -> np.ndarray:
    cells = math.ceil(size / block)
    u = rng.uniforms(cells * cells).reshape(cells, cells)
    up = np.kron(u, np.ones((block, block)))[:size, :size]
    return lo + (hi - lo) * up


def _tumor_field(rng: SplitMix64, p: TextureParams) -> np.ndarray:
    s = p.patch_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c1 = np.full((s, s), p.tumor_base[0])
    count = rng.randint(p.tumor_blob_count[0], p.tumor_blob_count[1] + 1)
    for _ in range(count):
        cx, cy = rng.uniform(0, s), rng.uniform(0, s)
        sigma = rng.uniform(*p.tumor_blob_sigma)
        amp = rng.uniform(*p.tumor_blob_amp)
        c1 += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    c2 = p.tumor_base[1] + _blocky_field(rng, s, 16, 0.0, 0.15)
    return np.stack((c1, c2), axis=-1)


def _stroma_field(rng: SplitMix64, p: TextureParams) -> np.ndarray:
    s = p.patch_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    theta = rng.uniform(0.0, math.pi)
    period = rng.uniform(*p.stripe_period)
    phase = rng.uniform(0.0, 2 * math.pi)
    amp = rng.uniform(*p.stripe_amp)
    band = 0.5 + 0.5 * np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phase)
    c1 = p.stroma_base[0] + 0.12 * (1.0 - band)
    c2 = p.stroma_base[1] + amp * band
    return np.stack((c1, c2), axis=-1)


def _other_field(rng: SplitMix64, p: TextureParams) -> np.ndarray:
    s = p.patch_size
    lo, hi = p.speckle_range
    c1 = _blocky_field(rng, s, p.speckle_block, lo, hi)
    c2 = _blocky_field(rng, s, p.speckle_block, lo, hi)
    return np.stack((c1, c2), axis=-1)


_FIELDS = {
    TissueClass.TUMOR: _tumor_field,
    TissueClass.STROMA: _stroma_field,
    TissueClass.OTHER: _other_field,
}


def gen_patch(tissue_class: TissueClass, params: TextureParams | None = None,
              seed: int = 0) -> RgbImage:
    """One procedural patch; bitwise-deterministic per (class, seed)."""
    p = params or TextureParams()
    rng = SplitMix64(derive_seed(seed, "patch", int(tissue_class)))
    c = _FIELDS[TissueClass(tissue_class)](rng, p)
    return RgbImage(concentrations_to_rgb(c, p.stain_matrix, p.i0))


def gen_corpus(classes: tuple[TissueClass, ...] = (TissueClass.TUMOR, TissueClass.STROMA, TissueClass.OTHER),
               n_per_class: int = 50,
               params: TextureParams | None = None,
               seed: int = 0) -> list[LabeledPatch]:
    """Balanced labeled corpus; n_per_class patches per class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = []
    for cls in classes:
        for i in range(n_per_class):
            pid = f"syn_{cls.label_name}_{i:04d}"
            out.append(LabeledPatch(pid, cls, gen_patch(cls, params, derive_seed(seed, "corpus", pid))))
    return out


# ----------------------------------------------------------------------
# Generic (non-histology) texture corpus for pretraining stand-ins
# ----------------------------------------------------------------------

def _generic_patch(kind: int, size: int, rng: SplitMix64) -> RgbImage:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:  # checkerboard
        period = rng.uniform(16, 48)
        v = ((xx // period + yy // period) % 2) * 160 + 40
    elif kind == 1:  # oriented gradient
        theta = rng.uniform(0, math.pi)
        proj = xx * math.cos(theta) + yy * math.sin(theta)
        v = 40 + 180 * (proj - proj.min()) / max(float(np.ptp(proj)), 1e-9)
    else:  # uniform noise
        v = 40 + 180 * rng.uniforms(size * size).reshape(size, size)
    data = np.repeat(np.clip(v, 0, 255).astype(np.uint8)[..., None], 3, axis=2)
    return RgbImage(data)


def gen_generic_corpus(n_per_class: int = 30, seed: int = 0,
                       size: int = PATCH_SIZE) -> list[LabeledPatch]:
    """Non-histology texture corpus (checker / gradient / noise), 3 classes."""
    out = []
    for kind, cls in enumerate((TissueClass.TUMOR, TissueClass.STROMA, TissueClass.OTHER)):
        for i in range(n_per_class):
            pid = f"gen_{kind}_{i:04d}"
            rng = SplitMix64(derive_seed(seed, "generic", pid))
            out.append(LabeledPatch(pid, cls, _generic_patch(kind, size, rng)))
    return out


# ----------------------------------------------------------------------
# Whole-slide generation with grid-exact ground truth
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    seed: int
    slide_size: tuple[int, int]  # (width, height) pixels
    class_layout: tuple[tuple[TissueClass, Rect], ...] = ()
    background_fraction: float = 0.3
    target_tsr: float | None = None

    def __post_init__(self):
        if self.target_tsr is not None and not 0.0 < self.target_tsr < 1.0:
            raise ValueError("target_tsr must be in (0, 1)")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ValueError("background_fraction must be in [0, 1)")


def _cells_of_rect(rect: Rect, cell: int, nx: int, ny: int) -> list[tuple[int, int]]:
    x, y, w, h = rect
    if any(v % cell for v in rect):
        raise ValueError(f"layout rect {rect} is not aligned to the {cell}-pixel grid")
    cx0, cy0, cw, ch = x // cell, y // cell, w // cell, h // cell
    if cx0 < 0 or cy0 < 0 or cx0 + cw > nx or cy0 + ch > ny:
        raise InfeasibleLayoutError(f"layout rect {rect} outside the slide grid")
    return [(ix, iy) for iy in range(cy0, cy0 + ch) for ix in range(cx0, cx0 + cw)]


def _choose_margin(nx: int, ny: int, background_fraction: float) -> int:
    for m in range(1, min(nx, ny) // 2 + 1):
        inner = (nx - 2 * m) * (ny - 2 * m)
        if inner < 1:
            break
        if 1.0 - inner / (nx * ny) >= background_fraction:
            return m
    raise InfeasibleLayoutError(
        f"no margin gives background fraction >= {background_fraction} "
        f"with tissue cells left on a {nx}x{ny} grid")


def gen_slide(spec: SynthSpec,
              params: TextureParams | None = None) -> tuple[RgbImage, Annotation, float | None]:
    """Synthetic slide, its annotation, and the grid-exact ground-truth TSR.

    With ``target_tsr`` set, a layout solver fills the interior grid (inside
    a whole-cell background margin) with tumor/stroma cells such that
    round(target * G) of the G tumor+stroma cells are stroma; class_layout
    entries must then be OTHER regions and are excluded from G. Without a
    target, class_layout is rendered verbatim (cell-aligned rects).
    """
    p = params or TextureParams()
    cell = p.patch_size
    width, height = spec.slide_size
    nx, ny = width // cell, height // cell

    cells: dict[tuple[int, int], TissueClass] = {}
    if spec.target_tsr is None:
        if not spec.class_layout:
            raise InfeasibleLayoutError("no target_tsr and no class_layout: all-background slide")
        for cls, rect in spec.class_layout:
            for c in _cells_of_rect(rect, cell, nx, ny):
                cells[c] = TissueClass(cls)
    else:
        if nx < 3 or ny < 3:
            raise InfeasibleLayoutError(
                f"slide {width}x{height} holds a {nx}x{ny} cell grid; need at least 3x3")
        m = _choose_margin(nx, ny, spec.background_fraction)
        interior = [(ix, iy) for iy in range(m, ny - m) for ix in range(m, nx - m)]
        for cls, rect in spec.class_layout:
            if TissueClass(cls) != TissueClass.OTHER:
                raise ValueError("with target_tsr set, class_layout may only place OTHER regions")
            for c in _cells_of_rect(rect, cell, nx, ny):
                if c not in interior:
                    raise InfeasibleLayoutError(f"OTHER cell {c} outside the interior grid")
                cells[c] = TissueClass.OTHER
        remaining = [c for c in interior if c not in cells]
        g = len(remaining)
        if g < 1:
            raise InfeasibleLayoutError("no interior cells left for tumor/stroma")
        n_stroma = int(math.floor(spec.target_tsr * g + 0.5))
        rng = SplitMix64(derive_seed(spec.seed, "layout"))
        rng.shuffle(remaining)
        for i, c in enumerate(remaining):
            cells[c] = TissueClass.STROMA if i < n_stroma else TissueClass.TUMOR

    n_t = sum(1 for v in cells.values() if v == TissueClass.TUMOR)
    n_s = sum(1 for v in cells.values() if v == TissueClass.STROMA)
    achieved = n_s / (n_t + n_s) if n_t + n_s > 0 else None

    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    polygons = []
    for (ix, iy) in sorted(cells, key=lambda c: (c[1], c[0])):
        cls = cells[(ix, iy)]
        patch = gen_patch(cls, p, derive_seed(spec.seed, "cell", ix, iy))
        x, y = ix * cell, iy * cell
        canvas[y:y + cell, x:x + cell] = patch.data
        ring = np.array([[x, y], [x + cell, y], [x + cell, y + cell], [x, y + cell]], dtype=np.float64)
        polygons.append(AnnotationPolygon(cls, ring))
    return RgbImage(canvas), Annotation(tuple(polygons)), achieved


def slide_spec_for_target(target: float, seed: int,
                          ts_cells: int = 12, other_cells: int = 2,
                          background_fraction: float = 0.3,
                          cell: int = PATCH_SIZE) -> SynthSpec:
    """A SynthSpec whose interior holds exactly ts_cells tumor/stroma cells
    plus other_cells OTHER cells (placed at the end of the interior)."""
    total = ts_cells + other_cells
    rows = max(1, int(math.floor(math.sqrt(total))))
    while total % rows:
        rows -= 1
    cols = total // rows
    m = 1
    width, height = (cols + 2 * m) * cell, (rows + 2 * m) * cell
    layout = []
    interior = [(ix, iy) for iy in range(m, m + rows) for ix in range(m, m + cols)]
    for (ix, iy) in interior[len(interior) - other_cells:] if other_cells else []:
        layout.append((TissueClass.OTHER, (ix * cell, iy * cell, cell, cell)))
    return SynthSpec(seed=seed, slide_size=(width, height),
                     class_layout=tuple(layout),
                     background_fraction=background_fraction,
                     target_tsr=target)
