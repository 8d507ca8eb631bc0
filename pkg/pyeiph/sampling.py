"""
patch sampling strategies over a fully annotated slide
  - uniform: origin uniform over all valid positions
  - two-stage: pick a grade cluster uniformly, then a cell of it, then
    jitter the patch around the cell
  - quad-tree: descend a spatial tree whose node probabilities follow the
    inverse grade frequency of the cells below them
@note:
  all randomness comes from the numpy Generator passed in
"""
import collections
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .core_model import *


@dataclass(frozen=True)
class SamplerConfig:
    patch_w: int = 1024
    patch_h: int = 1024
    seed: int = 0
    epsilon: float = 0.01
    max_depth: int = 3
    min_cells_per_node: int = 300
    split_rule: SplitRule = SplitRule.MinCells

    def __post_init__(self):
        if self.patch_w <= 0 or self.patch_h <= 0:
            raise EIPHError(f"patch size must be positive, got {self.patch_w}x{self.patch_h}")
        if not 0 <= self.epsilon < 1:
            raise EIPHError(f"epsilon must lie in [0,1), got {self.epsilon}")
        if self.max_depth < 0:
            raise EIPHError(f"max_depth must be non-negative, got {self.max_depth}")
        if self.min_cells_per_node < 0:
            raise EIPHError("min_cells_per_node must be non-negative")
        object.__setattr__(self, "split_rule", SplitRule(self.split_rule))

    def check_fits(self, meta: SlideMeta):
        if self.patch_w > meta.width or self.patch_h > meta.height:
            raise EIPHError(
                f"patch {self.patch_w}x{self.patch_h} larger than slide {meta.width}x{meta.height}"
            )

    def patch_at(self, origin) -> BoundingBox:
        return BoundingBox(origin[0], origin[1], self.patch_w, self.patch_h)


class PatchDraw(NamedTuple):
    origin: Tuple[int, int]
    anchor_id: Optional[int] = None


##########################################
# uniform
##########################################
def sample_uniform(meta: SlideMeta, cfg: SamplerConfig, rng) -> Tuple[int, int]:
    cfg.check_fits(meta)
    x = int(rng.integers(0, meta.width - cfg.patch_w + 1))
    y = int(rng.integers(0, meta.height - cfg.patch_h + 1))
    return x, y


def single_cell_hit_probability(meta: SlideMeta, cfg: SamplerConfig) -> float:
    """
    chance that a uniform patch covers a point cell away from the borders
    """
    cfg.check_fits(meta)
    positions = (meta.width - cfg.patch_w + 1) * (meta.height - cfg.patch_h + 1)
    return min(1.0, cfg.patch_w * cfg.patch_h / positions)


@eiph_timer
def uniform_hit_rate(meta: SlideMeta, cfg: SamplerConfig, point, n, rng, chunk=1 << 20):
    """
    Monte-Carlo frequency with which uniform patches contain `point`
    """
    cfg.check_fits(meta)
    px, py = point
    hits, left = 0, n
    while left > 0:
        m = min(chunk, left)
        xs = rng.integers(0, meta.width - cfg.patch_w + 1, size=m)
        ys = rng.integers(0, meta.height - cfg.patch_h + 1, size=m)
        hits += int(
            np.count_nonzero(
                (xs <= px) & (px < xs + cfg.patch_w) & (ys <= py) & (py < ys + cfg.patch_h)
            )
        )
        left -= m
    return hits / n


##########################################
# two-stage cluster sampling
##########################################
def build_clusters(annotations: AnnotationSet) -> Dict[int, Tuple[int, ...]]:
    clusters: Dict[int, List[int]] = {}
    for cell in annotations.cells:
        clusters.setdefault(cell.grade, []).append(cell.id)
    return {g: tuple(clusters[g]) for g in sorted(clusters)}


def _axis_range(lo_edge, hi_edge, patch, extent):
    lo = max(0, math.ceil(hi_edge - patch))
    hi = min(extent - patch, math.floor(lo_edge))
    return lo, hi


def jitter_origin(box: BoundingBox, meta: SlideMeta, cfg: SamplerConfig, rng):
    """
    origin uniform over all in-bounds positions whose patch fully holds `box`
    """
    x_lo, x_hi = _axis_range(box.x, box.x2, cfg.patch_w, meta.width)
    y_lo, y_hi = _axis_range(box.y, box.y2, cfg.patch_h, meta.height)
    if x_lo > x_hi or y_lo > y_hi:
        raise EIPHError(f"box {box} cannot fit inside a {cfg.patch_w}x{cfg.patch_h} patch")
    return int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1))


def sample_two_stage(
    clusters: Dict[int, Tuple[int, ...]],
    annotations: AnnotationSet,
    cfg: SamplerConfig,
    rng,
    cells_by_id: Optional[Dict[int, CellAnnotation]] = None,
) -> Tuple[int, Tuple[int, int]]:
    """
    Returns:
      (anchor cell id, patch origin)
    """
    grades = [g for g, ids in clusters.items() if ids]
    if not grades:
        raise EIPHError("no cells to sample")
    meta = annotations.require_slide()
    cfg.check_fits(meta)
    if cells_by_id is None:
        cells_by_id = annotations.by_id()
    ids = clusters[grades[int(rng.integers(len(grades)))]]
    anchor = ids[int(rng.integers(len(ids)))]
    return anchor, jitter_origin(cells_by_id[anchor].box, meta, cfg, rng)


##########################################
# quad-tree sampling
##########################################
class WeightedCell(NamedTuple):
    cell_id: int
    grade: int
    weight: float
    box: BoundingBox


@dataclass(frozen=True, eq=False)
class QuadTreeNode:
    bounds: BoundingBox
    depth: int
    cells: Tuple[WeightedCell, ...]
    raw_weight: float
    sibling_prob: float = 1.0
    # NW, NE, SE, SW
    children: Tuple["QuadTreeNode", ...] = ()
    _child_cdf: np.ndarray = field(default=None, repr=False)
    _cell_cdf: np.ndarray = field(default=None, repr=False)

    @property
    def is_leaf(self):
        return not self.children


def sibling_probabilities(raw, epsilon) -> np.ndarray:
    """
    p_i = (r_i + eps (S + d)) / sum_j (r_j + eps (S + d)), S = sum r,
    d = 1 iff every r is zero; uniform if everything vanishes
    """
    raw = np.asarray(raw, dtype=np.float64)
    s = raw.sum()
    delta = 1.0 if s == 0 else 0.0
    floored = raw + epsilon * (s + delta)
    total = floored.sum()
    if total <= 0:
        return np.full(len(raw), 1.0 / len(raw))
    return floored / total


def _quadrants(b: BoundingBox):
    x, y, w, h = int(b.x), int(b.y), int(b.w), int(b.h)
    hw, hh = w // 2, h // 2
    return (
        BoundingBox(x, y, hw, hh),
        BoundingBox(x + hw, y, w - hw, hh),
        BoundingBox(x + hw, y + hh, w - hw, h - hh),
        BoundingBox(x, y + hh, hw, h - hh),
    )


def _quadrant_of(b: BoundingBox, cx, cy) -> int:
    east = cx >= int(b.x) + int(b.w) // 2
    south = cy >= int(b.y) + int(b.h) // 2
    if south:
        return 2 if east else 3
    return 1 if east else 0


def _cdf(weights) -> np.ndarray:
    cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
    if cdf[-1] > 0:
        cdf /= cdf[-1]
    return cdf


def _pick(cdf: np.ndarray, rng) -> int:
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)


def _should_split(bounds, parts, cfg: SamplerConfig, depth) -> bool:
    if depth >= cfg.max_depth or bounds.w < 2 or bounds.h < 2:
        return False
    if cfg.split_rule == SplitRule.PatchSize:
        return int(bounds.w) // 2 >= cfg.patch_w and int(bounds.h) // 2 >= cfg.patch_h
    return all(len(p) >= cfg.min_cells_per_node for p in parts)


def _build_node(bounds, cells, depth, cfg, sibling_prob=1.0) -> QuadTreeNode:
    raw = math.fsum(c.weight for c in cells)
    cell_cdf = _cdf([c.weight for c in cells]) if cells else None
    if bounds.w < 2 or bounds.h < 2 or depth >= cfg.max_depth:
        return QuadTreeNode(bounds, depth, tuple(cells), raw, sibling_prob, (), None, cell_cdf)
    quads = _quadrants(bounds)
    parts = [[] for _ in quads]
    for c in cells:
        parts[_quadrant_of(bounds, *c.box.center)].append(c)
    if not _should_split(bounds, parts, cfg, depth):
        return QuadTreeNode(bounds, depth, tuple(cells), raw, sibling_prob, (), None, cell_cdf)
    probs = sibling_probabilities([math.fsum(c.weight for c in p) for p in parts], cfg.epsilon)
    children = tuple(
        _build_node(q, p, depth + 1, cfg, float(pr)) for q, p, pr in zip(quads, parts, probs)
    )
    return QuadTreeNode(
        bounds, depth, tuple(cells), raw, sibling_prob, children, _cdf(probs), cell_cdf
    )


@eiph_timer
def build_quadtree(annotations: AnnotationSet, cfg: SamplerConfig) -> QuadTreeNode:
    """
    Args:
      annotations: the fully annotated slide
      cfg: patch size, depth, split guard and empty-node floor epsilon
    Returns:
      the root; each cell weighs 1 / (number of cells of its grade), so
      every present grade carries a total weight of one
    """
    meta = annotations.require_slide()
    cfg.check_fits(meta)
    per_grade = collections.Counter(c.grade for c in annotations.cells)
    cells = [
        WeightedCell(c.id, c.grade, 1.0 / per_grade[c.grade], c.box) for c in annotations.cells
    ]
    root = _build_node(meta.bounds, cells, 0, cfg)
    eiph_print(
        f"quad-tree for {meta.id}: {len(leaves(root))} leaves, "
        f"{len(cells)} cells, {len(per_grade)} grades"
    )
    return root


def leaves(tree: QuadTreeNode) -> List[Tuple[Tuple[int, ...], QuadTreeNode]]:
    out = []
    stack = [((), tree)]
    while stack:
        path, node = stack.pop()
        if node.is_leaf:
            out.append((path, node))
            continue
        for i in reversed(range(len(node.children))):
            stack.append((path + (i,), node.children[i]))
    return out


def path_probability(tree: QuadTreeNode, path) -> float:
    p, node = 1.0, tree
    for i in path:
        node = node.children[i]
        p *= node.sibling_prob
    return p


class QuadTreeDraw(NamedTuple):
    origin: Tuple[int, int]
    anchor_id: Optional[int]
    path: Tuple[int, ...]


def sample_quadtree(tree: QuadTreeNode, meta: SlideMeta, cfg: SamplerConfig, rng) -> QuadTreeDraw:
    node, path = tree, []
    while node.children:
        i = _pick(node._child_cdf, rng)
        path.append(i)
        node = node.children[i]
    if node.cells:
        cell = node.cells[_pick(node._cell_cdf, rng)]
        return QuadTreeDraw(jitter_origin(cell.box, meta, cfg, rng), cell.cell_id, tuple(path))
    # empty leaf: uniform over the leaf's valid origins
    b = node.bounds
    max_x, max_y = meta.width - cfg.patch_w, meta.height - cfg.patch_h
    x_lo, x_hi = min(int(b.x), max_x), min(int(b.x2) - 1, max_x)
    y_lo, y_hi = min(int(b.y), max_y), min(int(b.y2) - 1, max_y)
    origin = int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1))
    return QuadTreeDraw(origin, None, tuple(path))


##########################################
# strategy comparison
##########################################
@eiph_timer
def draw_patches(
    annotations: AnnotationSet, cfg: SamplerConfig, strategy: SamplingStrategy, n, rng
) -> List[PatchDraw]:
    meta = annotations.require_slide()
    strategy = SamplingStrategy(strategy)
    if strategy == SamplingStrategy.Uniform:
        return [PatchDraw(sample_uniform(meta, cfg, rng)) for _ in range(n)]
    if strategy == SamplingStrategy.TwoStage:
        clusters, by_id = build_clusters(annotations), annotations.by_id()
        out = []
        for _ in range(n):
            anchor, origin = sample_two_stage(clusters, annotations, cfg, rng, by_id)
            out.append(PatchDraw(origin, anchor))
        return out
    tree = build_quadtree(annotations, cfg)
    return [PatchDraw(*sample_quadtree(tree, meta, cfg, rng)[:2]) for _ in range(n)]


def sampled_grade_distribution(
    annotations: AnnotationSet, cfg: SamplerConfig, strategy: SamplingStrategy, n, rng
) -> np.ndarray:
    """
    Returns:
      fraction of each grade among the cells centered in `n` drawn patches
    """
    index = CellIndex(annotations.cells)
    counts = np.zeros(N_GRADES, dtype=np.int64)
    for draw in draw_patches(annotations, cfg, strategy, n, rng):
        for cell in index.centered_in(cfg.patch_at(draw.origin)):
            counts[cell.grade] += 1
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)
