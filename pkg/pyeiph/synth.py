"""
synthetic slides: graded cells drawn as discs on a white, sparsely tiled
raster, plus their annotations and the golden fixtures used by the tests
@note:
  - the disc colour of a grade gets bluer with the grade:
    B - (R + G) / 2 is strictly increasing over GRADE_COLORS
  - tiles without any cell are not written (absent tile = white)
"""
import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .annot_io import (
    Rating,
    RatingTable,
    SlideSource,
    dump_annotations,
    open_slide,
    parse_annotations,
    write_manifest,
    write_tile_file,
)
from .core_model import *
from .evaluation import adjacent_confusion
from .scoring import grade_counts, ths

GRADE_COLORS = (
    (205, 180, 170),
    (170, 160, 190),
    (125, 125, 200),
    (80, 90, 200),
    (25, 35, 170),
)
MAX_ATTEMPTS = 1000
ANNOTATIONS_FILE = "annotations.jsonl"
EXPECTED_FILE = "expected.json"


def blue_saturation(rgb) -> float:
    r, g, b = (float(v) for v in rgb)
    return b - (r + g) / 2.0


class SpatialMode(IntEnum):
    """
    where the cells go
    """

    Uniform = 0
    GradientX = 1  # expected grade rises from left to right
    Clustered = 2

    @staticmethod
    def parse(name):
        table = {"uniform": 0, "gradient_x": 1, "clustered": 2}
        if isinstance(name, str):
            if name.lower() not in table:
                raise EIPHError(f"unknown spatial mode {name!r}")
            return SpatialMode(table[name.lower()])
        return SpatialMode(name)


class PinnedCell(NamedTuple):
    cx: int
    cy: int
    grade: int


@dataclass(frozen=True)
class SynthConfig:
    width: int
    height: int
    cell_count: int
    grade_mix: Tuple[float, ...] = (1.0,) * N_GRADES
    spatial_mode: SpatialMode = SpatialMode.Uniform
    cell_radius_px: int = 35
    seed: int = 0
    slide_id: str = "synthetic"
    staining: Staining = Staining.Prussian
    resolution: float = REFERENCE_MPP
    tile_size: int = 1024
    tile_format: TileFormat = TileFormat.PPM
    # placed before the random cells, not counted in cell_count
    pinned: Tuple[PinnedCell, ...] = ()
    n_clusters: int = 8

    def __post_init__(self):
        mix = tuple(float(v) for v in self.grade_mix)
        if len(mix) != N_GRADES or any(v < 0 for v in mix) or sum(mix) <= 0:
            raise EIPHError(f"grade_mix needs {N_GRADES} non-negative weights, not all zero")
        if self.cell_count < 0:
            raise EIPHError(f"cell_count must be non-negative, got {self.cell_count}")
        if self.cell_radius_px <= 0:
            raise EIPHError("cell_radius_px must be positive")
        d = 2 * self.cell_radius_px
        if d > self.width or d > self.height:
            raise EIPHError(f"cells of diameter {d} do not fit a {self.width}x{self.height} slide")
        object.__setattr__(self, "grade_mix", mix)
        object.__setattr__(self, "spatial_mode", SpatialMode.parse(self.spatial_mode))
        object.__setattr__(self, "tile_format", TileFormat(self.tile_format))
        object.__setattr__(self, "pinned", tuple(PinnedCell(*p) for p in self.pinned))

    @property
    def meta(self) -> SlideMeta:
        return SlideMeta(self.slide_id, self.width, self.height, self.staining, self.resolution)


##########################################
# grades & placement
##########################################
def quota_grades(n, mix) -> List[int]:
    """
    largest-remainder apportionment of n cells over the mix (ties to the
    lower grade), listed grade by grade
    """
    mix = np.asarray(mix, dtype=np.float64)
    exact = n * mix / mix.sum()
    counts = np.floor(exact).astype(np.int64)
    order = sorted(GRADES, key=lambda g: (-(exact[g] - counts[g]), g))
    for g in order[: n - int(counts.sum())]:
        counts[g] += 1
    return [g for g in GRADES for _ in range(int(counts[g]))]


def tilted_mix(mix, u) -> np.ndarray:
    """grade distribution at relative x position u in [0, 1]"""
    w = np.asarray(mix, dtype=np.float64) * np.exp(2.0 * (np.arange(N_GRADES) - 2) * (2.0 * u - 1.0))
    return w / w.sum()


class _DiscGrid:
    """hash grid rejecting discs that would overlap a placed one"""

    def __init__(self, radius):
        self.r = radius
        self.size = 2 * radius
        self.buckets: Dict[Tuple[int, int], List[Tuple[float, float]]] = {}

    def free(self, cx, cy) -> bool:
        bx, by = int(cx // self.size), int(cy // self.size)
        lim = self.size ** 2
        for i in (bx - 1, bx, bx + 1):
            for j in (by - 1, by, by + 1):
                for ox, oy in self.buckets.get((i, j), ()):
                    if (ox - cx) ** 2 + (oy - cy) ** 2 < lim:
                        return False
        return True

    def add(self, cx, cy):
        self.buckets.setdefault((int(cx // self.size), int(cy // self.size)), []).append((cx, cy))


def _propose(cfg: SynthConfig, rng, clusters) -> Tuple[int, int]:
    r = cfg.cell_radius_px
    max_x, max_y = cfg.width - 2 * r, cfg.height - 2 * r
    if clusters is None:
        return int(rng.integers(0, max_x + 1)), int(rng.integers(0, max_y + 1))
    centers, sigma = clusters
    cx, cy = centers[int(rng.integers(len(centers)))]
    x = int(round(rng.normal(cx, sigma))) - r
    y = int(round(rng.normal(cy, sigma))) - r
    return min(max(x, 0), max_x), min(max(y, 0), max_y)


@eiph_timer
def place_cells(cfg: SynthConfig, rng) -> List[CellAnnotation]:
    r = cfg.cell_radius_px
    d = 2 * r
    grid = _DiscGrid(r)
    cells = []
    for p in cfg.pinned:
        x, y = p.cx - r, p.cy - r
        if x < 0 or y < 0 or x + d > cfg.width or y + d > cfg.height:
            raise EIPHError(f"pinned cell at ({p.cx}, {p.cy}) does not fit the slide")
        if not grid.free(p.cx, p.cy):
            raise EIPHError(f"pinned cells overlap at ({p.cx}, {p.cy})")
        grid.add(p.cx, p.cy)
        cells.append(CellAnnotation(len(cells), BoundingBox(x, y, d, d), check_grade(p.grade)))
    clusters = None
    if cfg.spatial_mode == SpatialMode.Clustered:
        centers = [
            (float(rng.uniform(0, cfg.width)), float(rng.uniform(0, cfg.height)))
            for _ in range(max(cfg.n_clusters, 1))
        ]
        clusters = (centers, min(cfg.width, cfg.height) / 40.0)
    grades = None
    if cfg.spatial_mode != SpatialMode.GradientX:
        grades = np.array(quota_grades(cfg.cell_count, cfg.grade_mix), dtype=np.int64)
        rng.shuffle(grades)
    for k in range(cfg.cell_count):
        for _ in range(MAX_ATTEMPTS):
            x, y = _propose(cfg, rng, clusters)
            if grid.free(x + r, y + r):
                break
        else:
            raise EIPHError(
                f"cannot place cell {k} after {MAX_ATTEMPTS} attempts, configuration too dense"
            )
        grid.add(x + r, y + r)
        if grades is None:
            u = (x + r) / cfg.width
            grade = int(rng.choice(N_GRADES, p=tilted_mix(cfg.grade_mix, u)))
        else:
            grade = int(grades[k])
        cells.append(CellAnnotation(len(cells), BoundingBox(x, y, d, d), grade))
    return cells


##########################################
# rendering
##########################################
def draw_cells(tile: np.ndarray, origin: Tuple[int, int], cells: Sequence[CellAnnotation]):
    """paints each cell's disc into `tile`, whose top-left pixel is `origin`"""
    ox, oy = origin
    th, tw = tile.shape[:2]
    for c in cells:
        b = c.box
        cx, cy = b.center
        rad = b.w / 2.0
        x0, y0 = max(int(b.x), ox), max(int(b.y), oy)
        x1, y1 = min(int(b.x2), ox + tw), min(int(b.y2), oy + th)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= rad ** 2
        view = tile[y0 - oy : y1 - oy, x0 - ox : x1 - ox]
        view[mask] = GRADE_COLORS[c.grade]


@eiph_timer
def render_tiles(cfg: SynthConfig, cells: Sequence[CellAnnotation], out_dir) -> int:
    """
    Returns:
      number of tiles written
    """
    ts = cfg.tile_size
    index = CellIndex(cells)
    written = 0
    for row in range(-(-cfg.height // ts)):
        for col in range(-(-cfg.width // ts)):
            x, y = col * ts, row * ts
            w, h = min(ts, cfg.width - x), min(ts, cfg.height - y)
            inside = index.intersecting(BoundingBox(x, y, w, h))
            if not inside:
                continue
            tile = np.full((h, w, 3), 255, dtype=np.uint8)
            draw_cells(tile, (x, y), inside)
            name = f"tiles/{col}_{row}.{cfg.tile_format.suffix}"
            write_tile_file(Path(out_dir) / name, tile, cfg.tile_format)
            written += 1
    return written


@eiph_timer
def generate(cfg: SynthConfig, out_dir) -> Tuple[SlideSource, AnnotationSet]:
    """
    writes manifest.json, the non-empty tiles and annotations.jsonl
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    cells = place_cells(cfg, rng)
    annotations = AnnotationSet(cfg.meta, tuple(cells))
    manifest = write_manifest(out_dir, cfg.meta, cfg.tile_size, cfg.tile_format)
    n_tiles = render_tiles(cfg, cells, out_dir)
    dump_annotations(annotations, out_dir / ANNOTATIONS_FILE)
    eiph_print(f"synth {cfg.slide_id}: {len(cells)} cells, {n_tiles} tiles written to {out_dir}")
    return open_slide(manifest, cfg.slide_id), annotations


##########################################
# golden fixtures
##########################################
FIXTURES: Dict[str, SynthConfig] = {
    "mini": SynthConfig(
        width=4096, height=4096, cell_count=200, seed=11, slide_id="mini",
    ),
    "gradient": SynthConfig(
        width=8192,
        height=8192,
        cell_count=2000,
        spatial_mode=SpatialMode.GradientX,
        seed=12,
        slide_id="gradient",
    ),
    # the rare-cell scenario: one grade-4 cell among 1000 grade-0 cells
    "sparse-rare": SynthConfig(
        width=35999,
        height=34118,
        cell_count=1000,
        grade_mix=(1, 0, 0, 0, 0),
        spatial_mode=SpatialMode.Clustered,
        seed=13,
        slide_id="sparse-rare",
        staining=Staining.Turnbull,
        tile_format=TileFormat.PNG,
        pinned=((18000, 17000, 4),),
    ),
}


class Fixture(NamedTuple):
    name: str
    directory: Path
    slide: SlideSource
    annotations: AnnotationSet
    expected: dict


def expected_report(annotations: AnnotationSet) -> dict:
    counts = grade_counts(annotations.cells)
    report = {"version": "1", "slide": annotations.require_slide().id, "cells": counts.total, "counts": list(counts)}
    if counts.total:
        t = ths(counts)
        report.update({"ths": t.rounded, "score": t.score, "diagnosis": t.diagnosis_confirmed})
    return report


def golden_fixture(name, root=None, regenerate=False) -> Fixture:
    """
    materializes (once) and opens a named fixture under `root`
    (EIPH_FIXTURE_DIR by default)
    """
    if name not in FIXTURES:
        raise EIPHError(f"unknown fixture {name!r}, known: {sorted(FIXTURES)}")
    cfg = FIXTURES[name]
    directory = Path(root or EIPH_FIXTURE_DIR) / name
    expected_path = directory / EXPECTED_FILE
    if regenerate or not expected_path.exists():
        slide, annotations = generate(cfg, directory)
        with open(expected_path, "w", encoding="utf-8") as f:
            json.dump(expected_report(annotations), f, indent=2, sort_keys=True)
            f.write("\n")
    else:
        slide = open_slide(directory / "manifest.json", cfg.slide_id)
        annotations = parse_annotations(directory / ANNOTATIONS_FILE)
    with open(expected_path, "r", encoding="utf-8") as f:
        expected = json.load(f)
    return Fixture(name, directory, slide, annotations, expected)


##########################################
# rating studies
##########################################
def simulate_ratings(
    rater_diagonals: Sequence[float],
    rng,
    n_per_grade=200,
    sessions=(0, 1),
) -> RatingTable:
    """
    a balanced reference set graded by raters whose errors spill to the
    adjacent grades; each session is an independent reading
    Args:
      rater_diagonals: per rater, the probability of grading like the reference
    """
    reference = {}
    for g in GRADES:
        for k in range(n_per_grade):
            reference[f"c{g}_{k:04d}"] = g
    cells = sorted(reference)
    records = []
    for i, diag in enumerate(rater_diagonals):
        cumulative = np.cumsum(adjacent_confusion(diag), axis=1)
        for s in sessions:
            u = rng.random(len(cells))
            for cell, v in zip(cells, u):
                grade = min(int(np.searchsorted(cumulative[reference[cell]], v, side="right")), N_GRADES - 1)
                records.append(Rating(cell, f"r{i}", s, grade))
    return RatingTable(tuple(records), reference)
