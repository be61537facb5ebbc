"""Dataset manifests, constrained slide splitting, stratified holdout/k-fold,
and nine-class-to-three-class collapsing of an external patch corpus.

All randomized operations are deterministic given their seed. Split
operations work on label sequences and return index arrays, so they apply
equally to in-memory patches and manifest rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotate import CLASS_ORDER, TissueClass
from .errors import (
    ConstraintsUnsatisfiableError,
    InsufficientClassPopulationError,
    TooFewPatchesError,
    UnknownClassNameError,
)
from .raster import RgbImage

VALID_TSR_CATEGORIES = tuple(range(10, 100, 10))

# Nine-class vocabulary of the external corpus. Only the five residual
# classes feed the collapsed *other* class; adipose and background never do.
RESIDUAL_SOURCES = ("debris", "lymphocytes", "mucus", "normal", "smooth_muscle")
NINE_CLASS_VOCAB = ("adipose", "background") + RESIDUAL_SOURCES + ("stroma", "tumor")


@dataclass(frozen=True)
class LabeledPatch:
    """An in-memory corpus record: id, ground-truth class, pixels."""
    patch_id: str
    label: TissueClass
    pixels: RgbImage


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    patch_counts: Mapping[TissueClass, int]
    true_tsr: int | None = None

    def __post_init__(self):
        if any(v < 0 for v in self.patch_counts.values()):
            raise ValueError("patch counts must be nonnegative")
        if self.true_tsr is not None and self.true_tsr not in VALID_TSR_CATEGORIES:
            raise ValueError(f"true_tsr must be one of {VALID_TSR_CATEGORIES}")

    def count(self, cls: TissueClass) -> int:
        return int(self.patch_counts.get(cls, 0))


@dataclass(frozen=True)
class SplitResult:
    train_slides: tuple[str, ...]
    test_slides: tuple[str, ...]
    train_counts: dict[TissueClass, int]
    test_counts: dict[TissueClass, int]


def _class_totals(slides: Sequence[SlideEntry]) -> dict[TissueClass, int]:
    return {c: sum(s.count(c) for s in slides) for c in CLASS_ORDER}


def split_with_constraints(slides: Sequence[SlideEntry], seed: int,
                           max_diff: int = 80,
                           min_test_per_class: int = 900,
                           min_test_fraction: float = 0.10,
                           max_attempts: int = 10_000) -> SplitResult:
    """Random train/test slide split under class-balance constraints.

    Each attempt draws a uniform random test subset of
    ceil(min_test_fraction * n) slides and accepts it iff the per-class
    train totals spread at most ``max_diff`` and every test class holds at
    least ``min_test_per_class`` patches.
    """
    if not slides:
        raise ValueError("no slides to split")
    n = len(slides)
    n_test = max(1, math.ceil(min_test_fraction * n))
    if n_test >= n:
        raise ConstraintsUnsatisfiableError(f"test size {n_test} leaves no training slides")

    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        perm = rng.permutation(n)
        test = [slides[i] for i in perm[:n_test]]
        train = [slides[i] for i in perm[n_test:]]
        train_counts = _class_totals(train)
        test_counts = _class_totals(test)
        spread = max(train_counts.values()) - min(train_counts.values())
        if spread <= max_diff and all(v >= min_test_per_class for v in test_counts.values()):
            assert len(set(s.slide_id for s in test) & set(s.slide_id for s in train)) == 0
            return SplitResult(
                tuple(sorted(s.slide_id for s in train)),
                tuple(sorted(s.slide_id for s in test)),
                train_counts, test_counts)
    raise ConstraintsUnsatisfiableError(
        f"no split satisfied max_diff<={max_diff}, min_test_per_class>={min_test_per_class} "
        f"in {max_attempts} attempts")


# ----------------------------------------------------------------------
# Nine-class collapsing
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class NineClassEntry:
    patch_id: str
    source_class: str

    def __post_init__(self):
        if self.source_class not in NINE_CLASS_VOCAB:
            raise UnknownClassNameError(
                f"{self.source_class!r} not in nine-class vocabulary")


def other_quotas(n_other: int) -> dict[str, int]:
    """Per-residual-class sampling quota: n_other div 5, remainder one each
    to the alphabetically-first classes."""
    base, rem = divmod(n_other, len(RESIDUAL_SOURCES))
    ordered = sorted(RESIDUAL_SOURCES)
    return {cls: base + (1 if i < rem else 0) for i, cls in enumerate(ordered)}


def collapse_other(entries: Sequence[NineClassEntry], n_other: int,
                   seed: int) -> list[tuple[str, TissueClass]]:
    """Collapse nine source classes to {tumor, stroma, other}.

    Keeps every tumor and stroma entry; samples ``n_other`` entries evenly
    (per other_quotas) from the five residual classes. Adipose and
    background are never sampled. Returns (patch_id, class) rows.
    """
    out = [(e.patch_id, TissueClass.TUMOR) for e in entries if e.source_class == "tumor"]
    out += [(e.patch_id, TissueClass.STROMA) for e in entries if e.source_class == "stroma"]

    quotas = other_quotas(n_other)
    rng = np.random.default_rng(seed)
    for cls in sorted(RESIDUAL_SOURCES):
        pool = sorted(e.patch_id for e in entries if e.source_class == cls)
        quota = quotas[cls]
        if len(pool) < quota:
            raise InsufficientClassPopulationError(
                f"class {cls!r} has {len(pool)} entries, quota {quota}")
        chosen = rng.choice(len(pool), size=quota, replace=False)
        out += [(pool[i], TissueClass.OTHER) for i in sorted(chosen)]
    return out


# ----------------------------------------------------------------------
# Stratified holdout and k-fold over label sequences
# ----------------------------------------------------------------------

def _per_class_indices(labels: Sequence, rng: np.random.Generator) -> dict:
    labels = np.asarray(labels)
    out = {}
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        out[cls] = idx[rng.permutation(len(idx))]
    return out


def holdout_split(labels: Sequence, fraction: float = 1 / 3,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train_idx, val_idx); validation totals round(fraction * n).

    Per-class validation counts come from largest-remainder apportionment so
    the overall size is exact while classes stay proportional.
    """
    n = len(labels)
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if n < 3:
        raise TooFewPatchesError(f"need at least 3 patches, got {n}")
    target = round(fraction * n)
    if target < 1 or target >= n:
        raise TooFewPatchesError(f"validation size {target} infeasible for n={n}")

    rng = np.random.default_rng(seed)
    by_class = _per_class_indices(labels, rng)
    shares = {c: fraction * len(idx) for c, idx in by_class.items()}
    quota = {c: math.floor(s) for c, s in shares.items()}
    short = target - sum(quota.values())
    # hand out the remainder by largest fractional share, ties by class order
    for c in sorted(shares, key=lambda c: (-(shares[c] - quota[c]), c))[:short]:
        quota[c] += 1

    val, train = [], []
    for c, idx in by_class.items():
        val.append(idx[:quota[c]])
        train.append(idx[quota[c]:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def kfold(labels: Sequence, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """k stratified disjoint folds covering every index exactly once.

    Per-class fold sizes differ by at most 1; the classes' remainder
    assignments rotate across folds so overall fold sizes stay balanced.
    """
    n = len(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise TooFewPatchesError(f"need at least k={k} patches, got {n}")

    rng = np.random.default_rng(seed)
    by_class = _per_class_indices(labels, rng)
    folds: list[list[np.ndarray]] = [[] for _ in range(k)]
    offset = 0
    for c in sorted(by_class):
        idx = by_class[c]
        base, rem = divmod(len(idx), k)
        sizes = [base + (1 if (f - offset) % k < rem else 0) for f in range(k)]
        start = 0
        for f in range(k):
            folds[f].append(idx[start:start + sizes[f]])
            start += sizes[f]
        offset = (offset + rem) % k
    return [np.sort(np.concatenate(parts)) for parts in folds]


# ----------------------------------------------------------------------
# Patch split manifest: patch_id,slide_id,class,split
# ----------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test") + tuple(f"fold{i}" for i in range(5))
MANIFEST_HEADER = ["patch_id", "slide_id", "class", "split"]


@dataclass(frozen=True)
class ManifestRow:
    patch_id: str
    slide_id: str
    label: TissueClass
    split: str

    def __post_init__(self):
        if self.split not in SPLIT_NAMES:
            raise ValueError(f"split must be one of {SPLIT_NAMES}, got {self.split!r}")


def write_split_manifest(path: str | Path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.patch_id, r.slide_id, r.label.label_name, r.split])


def read_split_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.append(ManifestRow(row["patch_id"], row["slide_id"],
                                    TissueClass.from_name(row["class"]), row["split"]))
    return rows
