"""Per-slide tumor-stroma ratio and the evaluation-statistics suite.

TSR for one slide is n_stroma / (n_tumor + n_stroma); *other* patches never
enter the ratio. Slides are grouped stroma-high (tsr > cutoff) vs
stroma-low (tsr <= cutoff) at a 50% cutoff; the boundary value is low.

SEE here is the root-mean-square deviation between predicted and true
values (divisor n); the classical regression n-2 divisor is available via
the ``divisor`` flag and every report labels which one it used. The same
disclosure applies to the standard deviation (population form by default).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotate import CLASS_ORDER, TissueClass
from .errors import (
    EmptyInputError,
    LengthMismatchError,
    NoTumorOrStromaError,
    UnknownCategoryError,
    ZeroVarianceError,
)

STROMA_HIGH = "high"
STROMA_LOW = "low"

TSR_CATEGORIES = tuple(range(10, 100, 10))

EVAL_SCHEMA = "tsr-eval/1"
SCORES_HEADER = ["slide_id", "n_tumor", "n_stroma", "n_other", "tsr_percent", "category"]


def tsr(n_stroma: int, n_tumor: int) -> float:
    """Eq.-style ratio n_stroma / (n_tumor + n_stroma)."""
    if n_stroma < 0 or n_tumor < 0:
        raise ValueError("counts must be nonnegative")
    denom = n_stroma + n_tumor
    if denom == 0:
        raise NoTumorOrStromaError("no tumor or stroma patches")
    return n_stroma / denom


def stroma_category(value: float, cutoff: float = 0.5) -> str:
    """'high' iff value > cutoff, else 'low' (the boundary is low)."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"tsr must be in [0, 1], got {value}")
    return STROMA_HIGH if value > cutoff else STROMA_LOW


# ----------------------------------------------------------------------
# Classification metrics
# ----------------------------------------------------------------------

def confusion(true_labels: Sequence[TissueClass],
              pred_labels: Sequence[TissueClass]) -> np.ndarray:
    """3x3 counts; rows = true class, columns = predicted, in CLASS_ORDER."""
    if len(true_labels) != len(pred_labels):
        raise LengthMismatchError(f"{len(true_labels)} vs {len(pred_labels)} labels")
    if len(true_labels) == 0:
        raise EmptyInputError("no label pairs")
    cm = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        cm[int(t) - 1, int(p) - 1] += 1
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = int(cm.sum())
    if total == 0:
        raise EmptyInputError("empty confusion matrix")
    return float(np.trace(cm)) / total


def precision(cm: np.ndarray) -> dict[TissueClass, float | None]:
    """Per-class precision; None when the predicted column is empty."""
    cols = cm.sum(axis=0)
    return {c: (float(cm[i, i]) / cols[i] if cols[i] > 0 else None)
            for i, c in enumerate(CLASS_ORDER)}


def recall(cm: np.ndarray) -> dict[TissueClass, float | None]:
    """Per-class recall; None when the true row is empty."""
    rows = cm.sum(axis=1)
    return {c: (float(cm[i, i]) / rows[i] if rows[i] > 0 else None)
            for i, c in enumerate(CLASS_ORDER)}


def f1(cm: np.ndarray) -> dict[TissueClass, float | None]:
    """Per-class F1 = 2PR/(P+R); None when P or R is undefined or both 0."""
    p, r = precision(cm), recall(cm)
    out: dict[TissueClass, float | None] = {}
    for c in CLASS_ORDER:
        if p[c] is None or r[c] is None or (p[c] + r[c]) == 0:
            out[c] = None
        else:
            out[c] = 2 * p[c] * r[c] / (p[c] + r[c])
    return out


def cohen_kappa(a_labels: Sequence, b_labels: Sequence) -> float:
    """Chance-corrected agreement between two categorical label sequences.

    When chance agreement is 1 (both raters constant), kappa is defined as
    1 for perfect observed agreement and 0 otherwise.
    """
    if len(a_labels) != len(b_labels):
        raise LengthMismatchError(f"{len(a_labels)} vs {len(b_labels)} labels")
    n = len(a_labels)
    if n == 0:
        raise EmptyInputError("no label pairs")
    cats = sorted(set(a_labels) | set(b_labels), key=str)
    p_o = sum(1 for x, y in zip(a_labels, b_labels) if x == y) / n
    p_e = sum((sum(1 for x in a_labels if x == c) / n)
              * (sum(1 for y in b_labels if y == c) / n) for c in cats)
    if p_e >= 1.0 - 1e-15:
        return 1.0 if p_o >= 1.0 - 1e-15 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatchError(f"{x.shape} vs {y.shape}")
    if x.size < 2:
        raise EmptyInputError("need at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0:
        raise ZeroVarianceError("constant input sequence")
    return float(np.sum(xc * yc) / denom)


def see(pred: Sequence[float], true: Sequence[float], divisor: str = "n") -> float:
    """Standard error of the estimate: sqrt(sum((pred-true)^2) / divisor).

    divisor 'n' (default, RMSE form) or 'n-2' (classical regression form,
    requires more than 2 points).
    """
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise LengthMismatchError(f"{pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise EmptyInputError("no points")
    ss = float(np.sum((pred - true) ** 2))
    if divisor == "n":
        return float(np.sqrt(ss / pred.size))
    if divisor == "n-2":
        if pred.size <= 2:
            raise ValueError("divisor 'n-2' needs more than 2 points")
        return float(np.sqrt(ss / (pred.size - 2)))
    raise ValueError(f"divisor must be 'n' or 'n-2', got {divisor!r}")


# ----------------------------------------------------------------------
# Decile summary (per true-TSR category statistics)
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CategoryStats:
    mean: float | None
    median: float | None
    see: float | None
    std: float | None
    n: int


def decile_summary(scores: Sequence[tuple[int, float]],
                   see_divisor: str = "n",
                   std_ddof: int = 0) -> dict[int, CategoryStats]:
    """Per true-TSR-category stats of predicted TSR (both in percent).

    ``scores`` holds (true_category, predicted_percent) pairs. Category SEE
    is measured against the constant category value. Empty categories
    report n=0 with absent statistics.
    """
    buckets: dict[int, list[float]] = {c: [] for c in TSR_CATEGORIES}
    for cat, predicted in scores:
        if cat not in buckets:
            raise UnknownCategoryError(f"category {cat} not in {TSR_CATEGORIES}")
        buckets[cat].append(float(predicted))

    out = {}
    for cat, vals in buckets.items():
        if not vals:
            out[cat] = CategoryStats(None, None, None, None, 0)
            continue
        arr = np.asarray(vals)
        cat_see: float | None
        try:
            cat_see = see(arr, np.full(arr.size, float(cat)), see_divisor)
        except ValueError:
            cat_see = None  # n-2 divisor with n <= 2
        std = float(np.std(arr, ddof=std_ddof)) if arr.size > std_ddof else None
        out[cat] = CategoryStats(float(arr.mean()), float(np.median(arr)),
                                 cat_see, std, int(arr.size))
    return out


# ----------------------------------------------------------------------
# Slide scoring
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SlideScore:
    slide_id: str
    n_tumor: int
    n_stroma: int
    n_other: int
    tsr: float | None  # None = unscorable (no tumor or stroma patches)

    @property
    def unscorable(self) -> bool:
        return self.tsr is None

    @property
    def tsr_percent(self) -> float | None:
        return None if self.tsr is None else 100.0 * self.tsr

    @property
    def category(self) -> str | None:
        return None if self.tsr is None else stroma_category(self.tsr)


def score_slide(slide_id: str, patch_labels: Sequence[TissueClass]) -> SlideScore:
    """Count patch classes and compute TSR; flags (not drops) unscorable slides."""
    if len(patch_labels) == 0:
        raise EmptyInputError(f"slide {slide_id}: no patches")
    n_tumor = sum(1 for c in patch_labels if c == TissueClass.TUMOR)
    n_stroma = sum(1 for c in patch_labels if c == TissueClass.STROMA)
    n_other = sum(1 for c in patch_labels if c == TissueClass.OTHER)
    value = tsr(n_stroma, n_tumor) if n_tumor + n_stroma > 0 else None
    return SlideScore(slide_id, n_tumor, n_stroma, n_other, value)


# ----------------------------------------------------------------------
# Report assembly and file IO
# ----------------------------------------------------------------------

def write_scores_csv(path: str | Path, scores: Sequence[SlideScore]) -> None:
    """scores.csv with full-precision TSR percent (reports round separately)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SCORES_HEADER)
        for s in scores:
            if s.unscorable:
                continue
            writer.writerow([s.slide_id, s.n_tumor, s.n_stroma, s.n_other,
                             repr(s.tsr_percent), s.category])


def read_scores_csv(path: str | Path) -> list[SlideScore]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(SlideScore(row["slide_id"], int(row["n_tumor"]),
                                  int(row["n_stroma"]), int(row["n_other"]),
                                  float(row["tsr_percent"]) / 100.0))
    return out


def build_eval_report(scores: Sequence[SlideScore],
                      truth: Mapping[str, int],
                      config_echo: Mapping | None = None,
                      see_divisor: str = "n",
                      std_ddof: int = 0) -> dict:
    """Evaluation report of predicted vs true TSR (JSON-ready dict).

    ``truth`` maps slide_id to its true TSR category in {10, ..., 90}.
    Slides without truth are excluded from the comparison (but counted).
    """
    scored = [s for s in scores if not s.unscorable]
    paired = [(s, truth[s.slide_id]) for s in scored if s.slide_id in truth]
    pred = [s.tsr_percent for s, _ in paired]
    true = [float(cat) for _, cat in paired]

    report: dict = {
        "schema": EVAL_SCHEMA,
        "n_slides": len(scores),
        "n_scored": len(scored),
        "n_evaluated": len(paired),
        "see_divisor": see_divisor,
        "std_ddof": std_ddof,
    }
    if config_echo is not None:
        report["config"] = dict(config_echo)

    if paired:
        try:
            report["pearson_r"] = pearson_r(true, pred)
        except (ZeroVarianceError, EmptyInputError):
            report["pearson_r"] = None
        report["see"] = see(pred, true, see_divisor)
        pred_cats = [stroma_category(s.tsr) for s, _ in paired]
        true_cats = [stroma_category(cat / 100.0) for _, cat in paired]
        report["cohen_kappa_high_low"] = cohen_kappa(true_cats, pred_cats)
        deciles = decile_summary(
            [(cat, s.tsr_percent) for s, cat in paired], see_divisor, std_ddof)
        report["deciles"] = {
            str(cat): {"mean": st.mean, "median": st.median, "see": st.see,
                       "std": st.std, "n": st.n}
            for cat, st in deciles.items()
        }
    return report


def write_eval_json(path: str | Path, report: Mapping) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
