"""Slide-level TSR pipeline: mask -> tile -> normalize -> classify -> score.

Batch runs isolate per-slide failures by default: a slide that cannot be
masked, tiled or scored is recorded with a reason instead of aborting the
cohort (strict mode re-raises). Slide order in the output always matches
input order, also when slides are processed by a thread pool.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from . import model, scoring, stain, tiler
from .errors import (
    DegenerateHistogramError,
    EmptyInputError,
    InsufficientTissueError,
    SingularSystemError,
    TsrPipeError,
)
from .raster import RgbImage, tissue_mask
from .scoring import SlideScore

STAIN_FIT_PATCH = "patch"
STAIN_FIT_SLIDE = "slide"


@dataclass(frozen=True)
class SlideFailure:
    slide_id: str
    reason: str


@dataclass(frozen=True)
class BatchResult:
    scores: list[SlideScore]
    failures: list[SlideFailure]
    predictions: dict[str, list[model.PatchPrediction]]


def score_wsi(img: RgbImage, slide_id: str, classifier,
              cfg: tiler.TilingConfig | None = None,
              reference: stain.ReferenceProfile | None = None,
              stain_fit: str = STAIN_FIT_PATCH) -> tuple[SlideScore, list[model.PatchPrediction]]:
    """Score one slide; raises on unmaskable/untileable slides."""
    cfg = tiler.masked_config(cfg)
    mask = tissue_mask(img)

    source_profile = None
    if stain_fit == STAIN_FIT_SLIDE and cfg.normalize:
        source_profile = stain.estimate_profile(img)
    elif stain_fit not in (STAIN_FIT_PATCH, STAIN_FIT_SLIDE):
        raise ValueError(f"stain_fit must be 'patch' or 'slide', got {stain_fit!r}")

    records = tiler.tile_masked(img, mask, cfg, slide_id,
                                reference=reference, source_profile=source_profile)
    if not records:
        raise EmptyInputError(f"slide {slide_id}: no windows met the coverage rule")
    predictions = model.classify_manifest(classifier, records)
    score = scoring.score_slide(slide_id, [p.label for p in predictions])
    return score, predictions


def run_pipeline(slides: Sequence[tuple[str, RgbImage]],
                 classifier_for: Callable[[str, RgbImage], object],
                 cfg: tiler.TilingConfig | None = None,
                 reference: stain.ReferenceProfile | None = None,
                 stain_fit: str = STAIN_FIT_PATCH,
                 strict: bool = False,
                 jobs: int = 1) -> BatchResult:
    """Score a batch of (slide_id, image) pairs.

    ``classifier_for`` returns the classifier for a given slide (a constant
    classifier for checkpoint/external runs; per-slide oracles for synthetic
    ground truth). Unscorable slides (no tumor or stroma patches) are
    reported as failures, not scores.
    """
    def one(item: tuple[str, RgbImage]):
        slide_id, img = item
        try:
            return score_wsi(img, slide_id, classifier_for(slide_id, img),
                             cfg, reference, stain_fit)
        except (DegenerateHistogramError, InsufficientTissueError,
                SingularSystemError, EmptyInputError) as e:
            if strict:
                raise
            return SlideFailure(slide_id, f"{type(e).__name__}: {e}")

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, slides))
    else:
        results = [one(item) for item in slides]

    scores: list[SlideScore] = []
    failures: list[SlideFailure] = []
    predictions: dict[str, list[model.PatchPrediction]] = {}
    for item in results:
        if isinstance(item, SlideFailure):
            failures.append(item)
            continue
        score, preds = item
        predictions[score.slide_id] = preds
        if score.unscorable:
            failures.append(SlideFailure(score.slide_id, "Unscorable: no tumor or stroma patches"))
            if strict:
                raise TsrPipeError(f"slide {score.slide_id} is unscorable")
        else:
            scores.append(score)
    return BatchResult(scores, failures, predictions)
