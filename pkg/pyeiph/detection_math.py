"""
numerics of the multi-class whole-slide detector
  - anchors on the stride-32 feature grid, anchor/gt matching, class-wise NMS
  - the four loss terms: focal (classification), smooth-L1 (boxes),
    MSE of the cell score head and MSE of the patch score head
  - scaled sigmoid mapping logits onto the continuous grade range
  - closed-form gradients for every term, verified against finite
    differences and torch.autograd
@note:
  all tensors are float64; matching uses torchvision box ops on xyxy boxes
"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torchvision.ops import box_convert, box_iou

from .core_model import *

DTYPE = torch.float64

# tensor-level match labels, same convention as the torchvision matcher
BACKGROUND = -1
IGNORE = -2


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 32
    base_size: float = 32.0
    scales: tuple = (2.0 ** 0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
    ratios: tuple = (0.5, 1.0, 2.0)
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        if self.stride <= 0 or self.base_size <= 0:
            raise EIPHError("anchor stride and base_size must be positive")
        if not self.scales or not self.ratios:
            raise EIPHError("anchors need at least one scale and one ratio")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise EIPHError("anchor scales and ratios must be positive")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise EIPHError(
                f"need 0 <= neg_iou <= pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}"
            )
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(self, "ratios", tuple(self.ratios))

    @property
    def per_position(self):
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise EIPHError(f"alpha must lie in (0,1], got {self.alpha}")
        if self.gamma < 0:
            raise EIPHError(f"gamma must be non-negative, got {self.gamma}")


##########################################
# boxes
##########################################
def boxes_to_tensor(boxes: Sequence[BoundingBox]) -> torch.Tensor:
    """
    Returns:
      (n, 4) xyxy tensor
    """
    if not boxes:
        return torch.zeros((0, 4), dtype=DTYPE)
    return torch.tensor([b.to_xyxy() for b in boxes], dtype=DTYPE)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    return inter.area / (a.area + b.area - inter.area)


def pairwise_iou(a: Sequence[BoundingBox], b: Sequence[BoundingBox]) -> torch.Tensor:
    return box_iou(boxes_to_tensor(a), boxes_to_tensor(b))


def anchor_tensor(patch_w, patch_h, cfg: AnchorConfig) -> torch.Tensor:
    """
    anchors as an (n, 4) xyxy tensor, ordered by grid row, grid column,
    scale, ratio; a partial stride at the patch border gets no anchors
    """
    rows, cols = patch_h // cfg.stride, patch_w // cfg.stride
    scales = torch.tensor(cfg.scales, dtype=DTYPE)
    ratios = torch.tensor(cfg.ratios, dtype=DTYPE)
    # area (base * s)^2, aspect w / h = r
    ws = (cfg.base_size * scales[:, None] * ratios.sqrt()[None, :]).reshape(-1)
    hs = (cfg.base_size * scales[:, None] / ratios.sqrt()[None, :]).reshape(-1)
    cy = (torch.arange(rows, dtype=DTYPE) + 0.5) * cfg.stride
    cx = (torch.arange(cols, dtype=DTYPE) + 0.5) * cfg.stride
    gy, gx = torch.meshgrid(cy, cx, indexing="ij")
    k = ws.numel()
    cxcywh = torch.stack(
        [
            gx.reshape(-1, 1).expand(-1, k),
            gy.reshape(-1, 1).expand(-1, k),
            ws.expand(rows * cols, -1),
            hs.expand(rows * cols, -1),
        ],
        dim=-1,
    ).reshape(-1, 4)
    return box_convert(cxcywh, in_fmt="cxcywh", out_fmt="xyxy")


def generate_anchors(patch_w, patch_h, cfg: AnchorConfig = AnchorConfig()) -> List[BoundingBox]:
    xywh = box_convert(anchor_tensor(patch_w, patch_h, cfg), in_fmt="xyxy", out_fmt="xywh")
    return [BoundingBox(*row) for row in xywh.tolist()]


##########################################
# matching
##########################################
class MatchKind(Enum):
    Positive = "positive"
    Background = "background"
    Ignore = "ignore"


class AnchorTarget(NamedTuple):
    kind: MatchKind
    gt_id: Optional[int] = None


def _lowest_argmax(m: torch.Tensor, dim: int) -> torch.Tensor:
    """argmax along `dim`, ties resolved to the lowest index"""
    best = m.max(dim=dim, keepdim=True).values
    n = m.shape[dim]
    shape = [1, 1]
    shape[dim] = n
    idx = torch.arange(n).reshape(shape).expand_as(m)
    return torch.where(m == best, idx, torch.full_like(idx, n)).min(dim=dim).values


def match_indices(anchors: torch.Tensor, gt: torch.Tensor, pos_iou, neg_iou) -> torch.Tensor:
    """
    Args:
      anchors: (A, 4) xyxy
      gt: (G, 4) xyxy, in priority order (ties go to the lower row)
    Returns:
      (A,) long tensor: gt row for positives, BACKGROUND or IGNORE
    """
    n_anchors = anchors.shape[0]
    if gt.shape[0] == 0:
        return torch.full((n_anchors,), BACKGROUND, dtype=torch.long)
    m = box_iou(gt, anchors)  # (G, A)
    best_iou = m.max(dim=0).values
    matches = _lowest_argmax(m, 0)
    matches[best_iou < neg_iou] = BACKGROUND
    matches[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    # each gt keeps at least its best anchor
    best_anchor = _lowest_argmax(m, 1)
    for g in range(gt.shape[0]):
        a = int(best_anchor[g])
        if not bool((matches == g).any()) and float(m[g, a]) > 0:
            matches[a] = g
    return matches


def match_anchors(
    anchors: Sequence[BoundingBox], gt: Sequence[CellAnnotation], cfg: AnchorConfig = AnchorConfig()
) -> List[AnchorTarget]:
    ordered = sorted(gt, key=lambda c: c.id)
    idx = match_indices(
        boxes_to_tensor(anchors), boxes_to_tensor([c.box for c in ordered]), cfg.pos_iou, cfg.neg_iou
    )
    out = []
    for i in idx.tolist():
        if i == BACKGROUND:
            out.append(AnchorTarget(MatchKind.Background))
        elif i == IGNORE:
            out.append(AnchorTarget(MatchKind.Ignore))
        else:
            out.append(AnchorTarget(MatchKind.Positive, ordered[i].id))
    return out


##########################################
# non-maximum suppression
##########################################
def nms(dets: Sequence[Detection], iou_thr) -> List[Detection]:
    """
    greedy class-wise NMS
    Returns:
      the kept detections, by confidence descending (ties: smaller x, then y)
    """
    order = sorted(
        range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].box.x, dets[i].box.y)
    )
    by_grade: Dict[int, List[int]] = {}
    for i in order:
        by_grade.setdefault(dets[i].grade, []).append(i)
    kept = set()
    for members in by_grade.values():
        m = pairwise_iou([dets[i].box for i in members], [dets[i].box for i in members])
        suppressed = torch.zeros(len(members), dtype=torch.bool)
        for j in range(len(members)):
            if suppressed[j]:
                continue
            kept.add(members[j])
            suppressed |= m[j] >= iou_thr
    return [dets[i] for i in order if i in kept]


##########################################
# scalar loss terms
##########################################
def focal_loss(p_t, params: FocalParams = FocalParams(), positive=True) -> float:
    """
    -alpha_t (1 - p_t)^gamma log(p_t); alpha_t is alpha for a positive
    anchor and 1 - alpha for background
    """
    if not 0 < p_t <= 1:
        raise EIPHError(f"p_t must lie in (0,1], got {p_t}")
    alpha_t = params.alpha if positive else 1.0 - params.alpha
    return -alpha_t * (1.0 - p_t) ** params.gamma * math.log(p_t)


def focal_loss_grad(p_t, params: FocalParams = FocalParams(), positive=True) -> float:
    if not 0 < p_t <= 1:
        raise EIPHError(f"p_t must lie in (0,1], got {p_t}")
    alpha_t = params.alpha if positive else 1.0 - params.alpha
    g = params.gamma
    q = 1.0 - p_t
    modulating = g * q ** (g - 1.0) * math.log(p_t) if g > 0 and q > 0 else 0.0
    return alpha_t * (modulating - q ** g / p_t)


def _pair(x, y, what):
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1)
    y = torch.as_tensor(y, dtype=DTYPE).reshape(-1)
    if x.numel() != y.numel():
        raise EIPHError(f"{what}: length mismatch {x.numel()} != {y.numel()}")
    if x.numel() == 0:
        raise EIPHError(f"{what}: empty input")
    return x, y


def _smooth_l1(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    d = (x - y).abs()
    return torch.where(d < 1, 0.5 * d ** 2, d - 0.5).mean()


def smooth_l1(x, y) -> float:
    return float(_smooth_l1(*_pair(x, y, "smooth_l1")))


def smooth_l1_grad(x, y) -> torch.Tensor:
    """gradient with respect to x"""
    x, y = _pair(x, y, "smooth_l1")
    d = x - y
    return torch.where(d.abs() < 1, d, d.sign()) / d.numel()


def _mse(c: torch.Tensor, c_hat: torch.Tensor) -> torch.Tensor:
    return ((c - c_hat) ** 2).mean()


def mse(c, c_hat) -> float:
    return float(_mse(*_pair(c, c_hat, "mse")))


def mse_grad(c, c_hat) -> torch.Tensor:
    """gradient with respect to c"""
    c, c_hat = _pair(c, c_hat, "mse")
    return 2.0 * (c - c_hat) / c.numel()


def scaled_sigmoid(z):
    """
    maps a logit onto the continuous grade range (-0.5, 4.5)
    """
    if torch.is_tensor(z):
        return GRADE_LO + (GRADE_HI - GRADE_LO) * torch.sigmoid(z)
    # stable for large |z|
    if z >= 0:
        s = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        s = e / (1.0 + e)
    return GRADE_LO + (GRADE_HI - GRADE_LO) * s


def scaled_sigmoid_inverse(v) -> float:
    if not GRADE_LO < v < GRADE_HI:
        raise EIPHError(f"value must lie strictly inside ({GRADE_LO}, {GRADE_HI}), got {v}")
    u = (v - GRADE_LO) / (GRADE_HI - GRADE_LO)
    return math.log(u) - math.log1p(-u)


def scaled_sigmoid_grad(z) -> float:
    s = (scaled_sigmoid(z) - GRADE_LO) / (GRADE_HI - GRADE_LO)
    return (GRADE_HI - GRADE_LO) * s * (1.0 - s)


##########################################
# batch loss
##########################################
def _vec(x, width=None):
    t = torch.as_tensor(x if x is not None else [], dtype=DTYPE)
    if width is None:
        return t.reshape(-1)
    return t.reshape(-1, width)


@dataclass
class LossBatch:
    """
    Args:
      class_probs: (N, 5) per-anchor grade probabilities, background is 1 - sum
      class_targets: (N,) grade, BACKGROUND or IGNORE per anchor
      box_pred, box_target: (P, 4) regression of the positive anchors
      cell_score_pred, cell_score_target: (P,) cell score head
      patch_score_pred, patch_score_target: (Q,) patch score head, one per patch
    """

    class_probs: torch.Tensor
    class_targets: torch.Tensor
    box_pred: torch.Tensor = None
    box_target: torch.Tensor = None
    cell_score_pred: torch.Tensor = None
    cell_score_target: torch.Tensor = None
    patch_score_pred: torch.Tensor = None
    patch_score_target: torch.Tensor = None

    def __post_init__(self):
        self.class_probs = _vec(self.class_probs, N_GRADES)
        self.class_targets = torch.as_tensor(self.class_targets, dtype=torch.long).reshape(-1)
        self.box_pred = _vec(self.box_pred, 4)
        self.box_target = _vec(self.box_target, 4)
        for name in ("cell_score_pred", "cell_score_target", "patch_score_pred", "patch_score_target"):
            setattr(self, name, _vec(getattr(self, name)))
        if self.class_probs.shape[0] != self.class_targets.shape[0]:
            raise EIPHError("class_probs and class_targets differ in length")
        t = self.class_targets
        if bool(((t < IGNORE) | (t >= N_GRADES)).any()):
            raise EIPHError("class targets must be a grade, BACKGROUND or IGNORE")
        if self.box_pred.shape != self.box_target.shape:
            raise EIPHError("box_pred and box_target differ in shape")
        if self.cell_score_pred.shape != self.cell_score_target.shape:
            raise EIPHError("cell score prediction and target differ in length")
        if self.patch_score_pred.shape != self.patch_score_target.shape:
            raise EIPHError("patch score prediction and target differ in length")


class LossBreakdown(NamedTuple):
    total: float
    focal: float
    box: float
    cell_score: float
    patch_score: float


def _target_probability(probs: torch.Tensor, targets: torch.Tensor):
    valid = targets != IGNORE
    probs, targets = probs[valid], targets[valid]
    positive = targets >= 0
    background = 1.0 - probs.sum(dim=1)
    p_t = torch.where(positive, probs.gather(1, targets.clamp(min=0)[:, None])[:, 0], background)
    return p_t, positive


def _focal_term(probs: torch.Tensor, targets: torch.Tensor, params: FocalParams):
    p_t, positive = _target_probability(probs, targets)
    if p_t.numel() == 0:
        return probs.sum() * 0.0
    if bool((p_t <= 0).any()):
        raise EIPHError("target probability must be positive")
    alpha_t = torch.where(
        positive,
        torch.full_like(p_t, params.alpha),
        torch.full_like(p_t, 1.0 - params.alpha),
    )
    return (-alpha_t * (1.0 - p_t) ** params.gamma * torch.log(p_t)).mean()


def _optional(term, x, y):
    if x.numel() == 0:
        return x.sum() * 0.0
    return term(x, y)


def _loss_terms(batch: LossBatch, params: FocalParams, probs=None, box=None, cell=None, patch=None):
    probs = batch.class_probs if probs is None else probs
    box = batch.box_pred if box is None else box
    cell = batch.cell_score_pred if cell is None else cell
    patch = batch.patch_score_pred if patch is None else patch
    return (
        _focal_term(probs, batch.class_targets, params),
        _optional(_smooth_l1, box.reshape(-1), batch.box_target.reshape(-1)),
        _optional(_mse, cell, batch.cell_score_target),
        _optional(_mse, patch, batch.patch_score_target),
    )


def total_loss(batch: LossBatch, params: FocalParams = FocalParams()) -> LossBreakdown:
    """
    focal + smooth-L1 + MSE(cell score) + MSE(patch score); a term over an
    empty set of anchors or patches contributes 0
    """
    focal, box, cell, patch = (float(t) for t in _loss_terms(batch, params))
    return LossBreakdown(((focal + box) + cell) + patch, focal, box, cell, patch)


def loss_gradients(batch: LossBatch, params: FocalParams = FocalParams()) -> Dict[str, torch.Tensor]:
    """
    closed-form gradients of the total loss
    Returns:
      gradients w.r.t. class_probs, box_pred, cell_score_pred, patch_score_pred
    """
    probs, targets = batch.class_probs, batch.class_targets
    g_probs = torch.zeros_like(probs)
    valid = (targets != IGNORE).nonzero()[:, 0].tolist()
    for i in valid:
        t = int(targets[i])
        if t >= 0:
            g_probs[i, t] = focal_loss_grad(float(probs[i, t]), params, positive=True)
        else:
            d = focal_loss_grad(1.0 - float(probs[i].sum()), params, positive=False)
            g_probs[i, :] = -d
    if valid:
        g_probs /= len(valid)
    out = {"class_probs": g_probs}
    out["box_pred"] = (
        smooth_l1_grad(batch.box_pred.reshape(-1), batch.box_target.reshape(-1)).reshape(-1, 4)
        if batch.box_pred.numel()
        else torch.zeros_like(batch.box_pred)
    )
    out["cell_score_pred"] = (
        mse_grad(batch.cell_score_pred, batch.cell_score_target)
        if batch.cell_score_pred.numel()
        else torch.zeros_like(batch.cell_score_pred)
    )
    out["patch_score_pred"] = (
        mse_grad(batch.patch_score_pred, batch.patch_score_target)
        if batch.patch_score_pred.numel()
        else torch.zeros_like(batch.patch_score_pred)
    )
    return out


def autograd_gradients(batch: LossBatch, params: FocalParams = FocalParams()) -> Dict[str, torch.Tensor]:
    leaves = {
        "class_probs": batch.class_probs.clone().requires_grad_(True),
        "box_pred": batch.box_pred.clone().requires_grad_(True),
        "cell_score_pred": batch.cell_score_pred.clone().requires_grad_(True),
        "patch_score_pred": batch.patch_score_pred.clone().requires_grad_(True),
    }
    terms = _loss_terms(
        batch,
        params,
        probs=leaves["class_probs"],
        box=leaves["box_pred"],
        cell=leaves["cell_score_pred"],
        patch=leaves["patch_score_pred"],
    )
    total = ((terms[0] + terms[1]) + terms[2]) + terms[3]
    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    return {
        k: torch.zeros_like(v) if g is None else g.detach()
        for (k, v), g in zip(leaves.items(), grads)
    }


##########################################
# gradient verification
##########################################
def grad_check(f: Callable, point, analytic_grad, h=1e-5, mode="central") -> float:
    """
    Args:
      f: scalar function of a float64 tensor shaped like `point`
      point: where to check
      analytic_grad: gradient claimed at `point`
      h: step per coordinate
      mode: "central", or one-sided "forward" / "backward" (used at kinks)
    Returns:
      max_i |g_num - g_ana| / max(1, |g_num|)
    """
    x = torch.as_tensor(point, dtype=DTYPE).clone()
    g_ana = torch.as_tensor(analytic_grad, dtype=DTYPE).reshape(x.shape)
    flat = x.reshape(-1)

    def _eval(v):
        val = float(f(v.reshape(x.shape)))
        if not math.isfinite(val):
            raise EIPHError("non-finite function value in gradient check")
        return val

    if mode not in ("central", "forward", "backward"):
        raise EIPHError(f"unknown finite-difference mode {mode!r}")
    f0 = _eval(flat) if mode != "central" else None
    worst = 0.0
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        if mode == "central":
            g_num = (_eval(up) - _eval(down)) / (2 * h)
        elif mode == "forward":
            g_num = (_eval(up) - f0) / h
        else:
            g_num = (f0 - _eval(down)) / h
        err = abs(g_num - float(g_ana.reshape(-1)[i])) / max(1.0, abs(g_num))
        worst = max(worst, err)
    return worst


def random_loss_batch(rng, n_anchors=12, n_patches=2) -> LossBatch:
    """
    a small batch with probabilities bounded away from 0 and 1 and box
    residuals bounded away from the smooth-L1 kink
    """
    raw = rng.uniform(0.2, 1.0, size=(n_anchors, N_GRADES + 1))
    probs = raw / raw.sum(axis=1, keepdims=True)
    targets = rng.integers(IGNORE, N_GRADES, size=n_anchors)
    targets[:2] = (0, BACKGROUND)
    n_pos = int((targets >= 0).sum())
    box_target = rng.normal(size=(n_pos, 4))
    offsets = rng.choice([-1.0, 1.0], size=(n_pos, 4)) * rng.choice(
        [rng.uniform(0.1, 0.8), rng.uniform(1.3, 2.5)], size=(n_pos, 4)
    )
    cell_target = rng.uniform(GRADE_LO, GRADE_HI, size=n_pos)
    patch_target = rng.uniform(GRADE_LO, GRADE_HI, size=n_patches)
    return LossBatch(
        class_probs=probs[:, :N_GRADES],
        class_targets=targets,
        box_pred=box_target + offsets,
        box_target=box_target,
        cell_score_pred=cell_target + rng.normal(size=n_pos),
        cell_score_target=cell_target,
        patch_score_pred=patch_target + rng.normal(size=n_patches),
        patch_score_target=patch_target,
    )


def _term_check(name, f, x, g, tol, mode="central"):
    return {"check": name, "mode": mode, "max_rel_err": grad_check(f, x, g, mode=mode), "tol": tol}


@eiph_timer
def gradient_check_suite(seed=0, tol=1e-4, kink_tol=1e-2) -> List[dict]:
    """
    finite-difference and autograd checks of every loss gradient
    Returns:
      rows of {check, mode, max_rel_err, tol, passed}
    """
    rng = np.random.default_rng(seed)
    params = FocalParams()
    batch = random_loss_batch(rng)
    rows = []
    for p in (0.05, 0.3, 0.7, 0.95):
        for positive in (True, False):
            rows.append(
                _term_check(
                    f"focal p_t={p} {'pos' if positive else 'bg'}",
                    lambda v: focal_loss(float(v[0]), params, positive),
                    [p],
                    [focal_loss_grad(p, params, positive)],
                    tol,
                )
            )
    rows.append(
        _term_check(
            "focal batch",
            lambda v: _focal_term(v, batch.class_targets, params),
            batch.class_probs,
            loss_gradients(batch, params)["class_probs"],
            tol,
        )
    )
    bt = batch.box_target.reshape(-1)
    rows.append(
        _term_check(
            "smooth_l1",
            lambda v: smooth_l1(v, bt),
            batch.box_pred.reshape(-1),
            smooth_l1_grad(batch.box_pred.reshape(-1), bt),
            tol,
        )
    )
    kink_y = torch.zeros(3, dtype=DTYPE)
    kink_x = torch.tensor([1.0, -1.0, 0.25], dtype=DTYPE)
    for mode in ("forward", "backward"):
        rows.append(
            _term_check(
                "smooth_l1 kink",
                lambda v: smooth_l1(v, kink_y),
                kink_x,
                smooth_l1_grad(kink_x, kink_y),
                kink_tol,
                mode,
            )
        )
    rows.append(
        _term_check(
            "mse cell head",
            lambda v: mse(v, batch.cell_score_target),
            batch.cell_score_pred,
            mse_grad(batch.cell_score_pred, batch.cell_score_target),
            tol,
        )
    )
    rows.append(
        _term_check(
            "mse patch head",
            lambda v: mse(v, batch.patch_score_target),
            batch.patch_score_pred,
            mse_grad(batch.patch_score_pred, batch.patch_score_target),
            tol,
        )
    )
    for z in (-3.0, 0.0, 1.5):
        rows.append(
            _term_check(
                f"scaled_sigmoid z={z}",
                lambda v: scaled_sigmoid(float(v[0])),
                [z],
                [scaled_sigmoid_grad(z)],
                tol,
            )
        )
    closed, auto = loss_gradients(batch, params), autograd_gradients(batch, params)
    worst = max(
        float(((closed[k] - auto[k]).abs() / auto[k].abs().clamp(min=1.0)).max())
        if closed[k].numel()
        else 0.0
        for k in closed
    )
    rows.append({"check": "closed form vs autograd", "mode": "exact", "max_rel_err": worst, "tol": tol})
    for r in rows:
        r["passed"] = bool(r["max_rel_err"] < r["tol"])
    return rows
