"""
patch score regression from colour histograms, the non-detection baseline
@note:
  kernel ridge regression with an RBF kernel, solved in closed form in
  float64 torch; lambda 0.1 by default
"""
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
import torch

from .annot_io import Patch, SlideSource, read_region
from .core_model import *
from .pipeline import TilePlan
from .sampling import SamplerConfig, build_quadtree, sample_quadtree

DTYPE = torch.float64
DEFAULT_BINS = 16
DEFAULT_LAMBDA = 0.1
SCORE_MAX = 400.0


def histogram_features(patch: Patch, bins=DEFAULT_BINS) -> np.ndarray:
    """
    Returns:
      3 x `bins` per-channel histograms over [0, 255], each normalized by
      the pixel count
    """
    px = np.asarray(patch.pixels if isinstance(patch, Patch) else patch)
    n = px.shape[0] * px.shape[1] if px.ndim == 3 else 0
    if n == 0:
        raise EIPHError("empty patch")
    idx = np.minimum(px.reshape(-1, 3).astype(np.int64) * bins // 256, bins - 1)
    return np.concatenate([np.bincount(idx[:, ch], minlength=bins) / n for ch in range(3)])


def rbf_kernel(a: torch.Tensor, b: torch.Tensor, sigma) -> torch.Tensor:
    return torch.exp(-torch.cdist(a, b) ** 2 / (2.0 * sigma ** 2))


@dataclass(frozen=True)
class KernelModel:
    support: torch.Tensor
    coef: torch.Tensor
    sigma: float
    lam: float

    def __post_init__(self):
        if self.support.shape[0] != self.coef.shape[0]:
            raise EIPHError("coefficient count must equal support count")


def _as_tensor(X) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(X, dtype=np.float64), dtype=DTYPE)
    return t.reshape(t.shape[0], -1) if t.ndim != 2 else t


def fit(X, y, sigma=1.0, lam=DEFAULT_LAMBDA) -> KernelModel:
    """
    solves (K + lam I) coef = y, K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))
    """
    X = _as_tensor(X)
    y = torch.as_tensor(np.asarray(y, dtype=np.float64), dtype=DTYPE).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise EIPHError(f"need matching non-empty X and y, got {X.shape[0]} and {y.shape[0]}")
    if sigma <= 0 or lam <= 0:
        raise EIPHError(f"sigma and lambda must be positive, got {sigma}, {lam}")
    K = rbf_kernel(X, X, sigma)
    coef = torch.linalg.solve(K + lam * torch.eye(X.shape[0], dtype=DTYPE), y)
    assert torch.isfinite(coef).all(), "singular kernel system"
    return KernelModel(X, coef, float(sigma), float(lam))


def predict(model: KernelModel, X) -> np.ndarray:
    """predictions clamped to the score range [0, 400]"""
    X = _as_tensor(X)
    raw = rbf_kernel(X, model.support, model.sigma) @ model.coef
    return raw.clamp(0.0, SCORE_MAX).numpy()


@eiph_timer
def grid_search(
    X, y, sigma_grid: Sequence[float], lambda_grid: Sequence[float], k_folds=5, writer=None
) -> Tuple[float, float]:
    """
    k-fold cross-validated grid search, fold of sample i is i % k
    Returns:
      (sigma, lambda) of the lowest mean validation MSE; ties go to the
      smaller lambda, then the smaller sigma
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(y)
    if k_folds < 2 or n < k_folds:
        raise EIPHError(f"degenerate folds: {n} samples for {k_folds} folds")
    if not sigma_grid or not lambda_grid:
        raise EIPHError("empty parameter grid")
    fold = np.arange(n) % k_folds
    best, best_mse, rows = None, np.inf, []
    for step, (lam, sigma) in enumerate(sorted((l, s) for l in lambda_grid for s in sigma_grid)):
        errs = []
        for k in range(k_folds):
            train, val = fold != k, fold == k
            model = fit(X[train], y[train], sigma, lam)
            errs.append(np.mean((predict(model, X[val]) - y[val]) ** 2))
        mse = float(np.mean(errs))
        rows.append({"sigma": sigma, "lambda": lam, "val_mse": mse})
        if writer is not None:
            writer.add_scalar("baseline/val_mse", mse, step)
        if mse < best_mse:
            best, best_mse = (sigma, lam), mse
    print_table(rows, "GRID SEARCH")
    return best


def _patch_score(cells) -> float:
    return 100.0 * sum(c.grade for c in cells) / len(cells)


@eiph_timer
def patch_dataset(
    slide: SlideSource,
    annotations: AnnotationSet,
    n=100,
    cfg: SamplerConfig = SamplerConfig(),
    rng=None,
    bins=DEFAULT_BINS,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    quad-tree sampled patches of one slide
    Returns:
      histogram features and 100 x mean grade of the cells centered in each
      patch; patches without cells are skipped
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    meta = annotations.require_slide()
    if not annotations.cells:
        raise EIPHError(f"slide {meta.id} has no cells to learn from")
    tree = build_quadtree(annotations, cfg)
    index = CellIndex(annotations.cells)
    X, y = [], []
    attempts = 0
    while len(y) < n and attempts < 20 * n:
        attempts += 1
        draw = sample_quadtree(tree, meta, cfg, rng)
        rect = cfg.patch_at(draw.origin)
        cells = index.centered_in(rect)
        if not cells:
            continue
        with read_region(slide, rect) as patch:
            X.append(histogram_features(patch, bins))
        y.append(_patch_score(cells))
    if not y:
        raise EIPHError(f"no sampled patch of slide {meta.id} holds a cell")
    return np.stack(X), np.asarray(y)


@eiph_timer
def evaluate_baseline(
    model: KernelModel, slide: SlideSource, annotations: AnnotationSet, plan: TilePlan, bins=DEFAULT_BINS
) -> Dict[str, float]:
    """
    per-tile and slide score error of the regression over a tile plan
    Returns:
      tile_mae / tile_sigma over tiles holding a cell center, and the slide
      error of the cell-weighted mean of those tile predictions
    """
    index = CellIndex(annotations.cells)
    errs, preds, weights = [], [], []
    for tile in plan.tiles:
        cells = index.centered_in(tile)
        if not cells:
            continue
        with read_region(slide, tile) as patch:
            pred = float(predict(model, histogram_features(patch, bins)[None, :])[0])
        errs.append(abs(pred - _patch_score(cells)))
        preds.append(pred)
        weights.append(len(cells))
    if not errs:
        raise EIPHError("no cells to score")
    errs = np.asarray(errs)
    slide_pred = float(np.average(preds, weights=weights))
    truth = _patch_score(annotations.cells)
    return {
        "tiles": len(errs),
        "tile_mae": float(errs.mean()),
        "tile_sigma": float(errs.std()),
        "slide_pred": slide_pred,
        "slide_error": abs(slide_pred - truth),
    }
