"""
domain types shared by every module of pyeiph
@note:
  - boxes are top-left + width/height in slide pixels everywhere;
    center form only appears inside detection_math
  - every type is an immutable value after construction
"""
import collections
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .eiph_utils import *


def check_grade(value) -> int:
    if isinstance(value, bool) or not float(value).is_integer():
        raise EIPHError(f"grade must be an integer, got {value!r}")
    value = int(value)
    if value not in GRADES:
        raise EIPHError(f"grade out of range: {value}")
    return value


def check_continuous_grade(value) -> float:
    value = float(value)
    if not GRADE_LO <= value <= GRADE_HI:
        raise EIPHError(f"continuous grade out of range: {value}")
    return value


class Staining(str, Enum):
    Prussian = "prussian"
    Turnbull = "turnbull"

    @staticmethod
    def parse(name):
        try:
            return Staining(str(name).lower())
        except ValueError:
            raise EIPHError(f"unknown staining {name!r}")


@dataclass(frozen=True)
class BoundingBox:
    """
    axis-aligned box, (x, y) is the top-left corner
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise EIPHError(f"box must have positive size, got {self.w}x{self.h}")

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def translate(self, dx, dy) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def intersects(self, other: "BoundingBox") -> bool:
        return (
            self.x < other.x2
            and other.x < self.x2
            and self.y < other.y2
            and other.y < self.y2
        )

    def intersection(self, other: "BoundingBox") -> Optional["BoundingBox"]:
        x, y = max(self.x, other.x), max(self.y, other.y)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x or y2 <= y:
            return None
        return BoundingBox(x, y, x2 - x, y2 - y)

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def contains_point(self, px, py) -> bool:
        # half-open, so adjacent boxes never share a point
        return self.x <= px < self.x2 and self.y <= py < self.y2

    def to_xyxy(self):
        return self.x, self.y, self.x2, self.y2


def check_cell_box(box: BoundingBox) -> BoundingBox:
    """
    cell and detection boxes start at x, y >= 0; bare boxes such as
    anchors and read regions may reach past the slide edge
    """
    if box.x < 0 or box.y < 0:
        raise EIPHError(f"negative box origin ({box.x}, {box.y})")
    return box


@dataclass(frozen=True)
class CellAnnotation:
    id: int
    box: BoundingBox
    grade: int

    def __post_init__(self):
        check_cell_box(self.box)

    @property
    def center(self):
        return self.box.center


@dataclass(frozen=True)
class SlideMeta:
    id: str
    width: int
    height: int
    staining: Staining = Staining.Prussian
    resolution: float = REFERENCE_MPP

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise EIPHError(
                f"slide {self.id}: dimensions must be positive, got {self.width}x{self.height}"
            )
        if self.resolution <= 0:
            raise EIPHError(f"slide {self.id}: resolution must be positive")

    @property
    def bounds(self) -> BoundingBox:
        return BoundingBox(0, 0, self.width, self.height)

    @property
    def area_mm2(self):
        return self.width * self.height * (self.resolution / 1000.0) ** 2


@dataclass(frozen=True)
class AnnotationSet:
    """
    all graded cells of one slide; `slide` is None only for an empty file
    """

    slide: Optional[SlideMeta]
    cells: Tuple[CellAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    def by_id(self) -> Dict[int, CellAnnotation]:
        return {c.id: c for c in self.cells}

    def require_slide(self) -> SlideMeta:
        if self.slide is None:
            raise EIPHError("annotation set has no slide header")
        return self.slide

    def with_cells(self, cells) -> "AnnotationSet":
        return AnnotationSet(self.slide, tuple(cells))


@dataclass(frozen=True)
class GradeCounts:
    counts: Tuple[int, ...] = (0,) * N_GRADES

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != N_GRADES:
            raise EIPHError(f"expected {N_GRADES} grade counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise EIPHError(f"grade counts must be non-negative: {counts}")
        object.__setattr__(self, "counts", counts)

    def __getitem__(self, g):
        return self.counts[g]

    def __iter__(self):
        return iter(self.counts)

    @property
    def total(self):
        return sum(self.counts)

    def scaled(self, k: int) -> "GradeCounts":
        return GradeCounts(tuple(c * k for c in self.counts))


@dataclass(frozen=True)
class Detection:
    """
    a predicted cell; `class_probs` leaves 1 - sum(class_probs) to background
    """

    box: BoundingBox
    class_probs: Tuple[float, ...]
    confidence: float
    score: float

    def __post_init__(self):
        check_cell_box(self.box)
        probs = tuple(float(p) for p in self.class_probs)
        if len(probs) != N_GRADES:
            raise EIPHError(f"expected {N_GRADES} class probabilities, got {len(probs)}")
        if any(p < 0 for p in probs) or sum(probs) > 1 + 1e-9:
            raise EIPHError(f"invalid class probabilities {probs}")
        if not 0.0 <= self.confidence <= 1.0:
            raise EIPHError(f"confidence must lie in [0,1], got {self.confidence}")
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "confidence", float(self.confidence))
        object.__setattr__(self, "score", check_continuous_grade(self.score))

    @property
    def grade(self) -> int:
        # argmax, ties to the lower grade
        return int(np.argmax(self.class_probs))

    @property
    def center(self):
        return self.box.center

    @staticmethod
    def certain(box: BoundingBox, grade: int, confidence=1.0) -> "Detection":
        """
        a detection carrying all of its class mass on one grade
        """
        probs = [0.0] * N_GRADES
        probs[check_grade(grade)] = 1.0
        return Detection(box, tuple(probs), confidence, float(grade))

    def translate(self, dx, dy) -> "Detection":
        return Detection(self.box.translate(dx, dy), self.class_probs, self.confidence, self.score)


def validate_annotation_set(annotations: AnnotationSet) -> List[str]:
    """
    lists every invariant violation of an annotation set, never raises
    Returns:
      [] iff the set is valid; each message names the cell id and the rule
    """
    violations = []
    seen, reported = set(), set()
    slide = annotations.slide
    for cell in annotations.cells:
        if cell.id in seen and cell.id not in reported:
            violations.append(f"duplicate id {cell.id}")
            reported.add(cell.id)
        seen.add(cell.id)
        if isinstance(cell.grade, bool) or cell.grade not in GRADES:
            violations.append(f"cell {cell.id}: grade out of range")
        box = cell.box
        if slide is not None and (box.x2 > slide.width or box.y2 > slide.height):
            violations.append(f"cell {cell.id}: box out of bounds")
    return violations


class CellIndex:
    """
    bucket grid over cell boxes; each item is filed under every bucket its
    box touches, so both overlap and center queries stay local
    """

    def __init__(self, cells: Iterable, bucket=512):
        self.bucket = bucket
        self.cells = list(cells)
        self._grid: Dict[Tuple[int, int], List[int]] = collections.defaultdict(list)
        for i, c in enumerate(self.cells):
            x0, y0, x1, y1 = c.box.to_xyxy()
            for bx in range(int(x0 // bucket), int(x1 // bucket) + 1):
                for by in range(int(y0 // bucket), int(y1 // bucket) + 1):
                    self._grid[bx, by].append(i)

    def _candidates(self, rect: BoundingBox):
        b = self.bucket
        found = set()
        for bx in range(int(rect.x // b), int(rect.x2 // b) + 1):
            for by in range(int(rect.y // b), int(rect.y2 // b) + 1):
                found.update(self._grid.get((bx, by), ()))
        return sorted(found)

    def intersecting(self, rect: BoundingBox) -> list:
        return [
            self.cells[i] for i in self._candidates(rect) if self.cells[i].box.intersects(rect)
        ]

    def centered_in(self, rect: BoundingBox) -> list:
        return [
            self.cells[i]
            for i in self._candidates(rect)
            if rect.contains_point(*self.cells[i].center)
        ]
