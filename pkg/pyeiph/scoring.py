"""
total hemosiderin score (THS) of a slide and the diagnosis rule
@note:
  - the 300-cell recipe sum_g (counts[g] / 3) * g generalizes to any N as
    100 * mean grade; it is computed exactly in rationals and rounded once
  - rounding is half away from zero (all scores are non-negative)
"""
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Tuple

import pandas as pd

from .core_model import *

THS_MAX = 400
DIAGNOSIS_THRESHOLD = 75
DOUCET_CELLS = 300


@dataclass(frozen=True)
class ThsResult:
    score: float
    rounded: int
    n_cells: int
    diagnosis_confirmed: bool

    def to_dict(self):
        return {
            "score": self.score,
            "rounded": self.rounded,
            "n_cells": self.n_cells,
            "diagnosis": self.diagnosis_confirmed,
        }


def round_half_away(value) -> int:
    value = Fraction(value)
    sign = -1 if value < 0 else 1
    return sign * math.floor(abs(value) + Fraction(1, 2))


def grade_counts(items: Iterable) -> GradeCounts:
    """
    Args:
      items: CellAnnotation or Detection objects, anything with a `.grade`
    """
    counts = [0] * N_GRADES
    for it in items:
        counts[it.grade] += 1
    return GradeCounts(tuple(counts))


def _exact_score(counts: GradeCounts) -> Fraction:
    n = counts.total
    if n < 1:
        raise EIPHError("no cells to score")
    return Fraction(100 * sum(g * c for g, c in enumerate(counts)), n)


def ths(counts: GradeCounts) -> ThsResult:
    exact = _exact_score(counts)
    rounded = round_half_away(exact)
    return ThsResult(
        score=float(exact),
        rounded=rounded,
        n_cells=counts.total,
        diagnosis_confirmed=rounded > DIAGNOSIS_THRESHOLD,
    )


def diagnose(score) -> bool:
    if not 0 <= score <= THS_MAX:
        raise EIPHError(f"score out of range [0, {THS_MAX}]: {score}")
    return round_half_away(Fraction(score)) > DIAGNOSIS_THRESHOLD


def doucet_score(counts: GradeCounts) -> float:
    """
    the literal 300-cell recipe: each grade count divided by three and
    multiplied with its grade, summed
    """
    if counts.total != DOUCET_CELLS:
        raise EIPHError(
            f"the 300-cell recipe needs exactly {DOUCET_CELLS} cells, got {counts.total}"
        )
    return float(sum(Fraction(c, 3) * g for g, c in enumerate(counts)))


def grade_statistics(counts: GradeCounts) -> Tuple[float, float]:
    """
    Returns:
      mean grade and population standard deviation of the grades
    """
    n = counts.total
    if n < 1:
        raise EIPHError("no cells to score")
    mu = Fraction(sum(g * c for g, c in enumerate(counts)), n)
    var = sum(c * (g - mu) ** 2 for g, c in enumerate(counts)) / n
    return float(mu), math.sqrt(var)


@eiph_timer
def dataset_summary(sets: Sequence[AnnotationSet]) -> pd.DataFrame:
    """
    per slide statistics (id, staining, totals, score, counts by grade,
    mean/sd of grades, area in mm^2)
    """
    rows = []
    for s in sets:
        slide = s.require_slide()
        counts = grade_counts(s.cells)
        row = {
            "slide": slide.id,
            "staining": slide.staining.value,
            "total": counts.total,
            "score": ths(counts).rounded if counts.total else None,
        }
        row.update({f"grade_{g}": counts[g] for g in GRADES})
        if counts.total:
            mu, sigma = grade_statistics(counts)
        else:
            mu = sigma = None
        row.update(
            {
                "mu": None if mu is None else round(mu, 2),
                "sigma": None if sigma is None else round(sigma, 2),
                "area_mm2": round(slide.area_mm2, 3),
            }
        )
        rows.append(row)
    return pd.DataFrame(rows)
