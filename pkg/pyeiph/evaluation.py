"""
detection metrics and observer agreement
  - greedy per-class matching, all-point interpolated AP and mAP
  - THS error of predictions per slide or per tile
  - confusion, Cohen's and Fleiss' kappa, concordance, per-grade F1
  - mAP of a hypothetical detector that finds every cell but grades it
    through a confusion matrix
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .annot_io import RatingTable
from .core_model import *
from .detection_math import pairwise_iou
from .pipeline import TilePlan
from .scoring import grade_counts, ths


##########################################
# detection metrics
##########################################
@dataclass
class MatchReport:
    # per grade: (confidence, is_true_positive) in rank order
    ranked: Dict[int, List[Tuple[float, bool]]] = field(default_factory=dict)
    gt_count: Dict[int, int] = field(default_factory=dict)
    unmatched_gt: List[int] = field(default_factory=list)

    def true_positives(self, grade) -> int:
        return sum(tp for _, tp in self.ranked.get(grade, []))


def _rank(dets: Sequence[Detection]) -> List[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def _greedy_match(gt_boxes, pred_boxes, order, iou_thr) -> List[Optional[int]]:
    """
    each prediction, in `order`, takes the unmatched gt of highest IoU
    >= iou_thr (ties to the lower gt position)
    Returns:
      gt position per prediction, None for a false positive
    """
    assigned: List[Optional[int]] = [None] * len(pred_boxes)
    if not gt_boxes or not pred_boxes:
        return assigned
    m = pairwise_iou(pred_boxes, gt_boxes).numpy()
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in order:
        row = np.where(taken | (m[i] < iou_thr), -1.0, m[i])
        j = int(np.argmax(row))
        if row[j] >= 0:
            taken[j] = True
            assigned[i] = j
    return assigned


@eiph_timer
def match_detections(gt: AnnotationSet, pred: Sequence[Detection], iou_thr=0.5) -> MatchReport:
    if not 0 < iou_thr <= 1:
        raise EIPHError(f"iou_thr must lie in (0,1], got {iou_thr}")
    report = MatchReport()
    for g in GRADES:
        cells = sorted((c for c in gt.cells if c.grade == g), key=lambda c: c.id)
        dets = [d for d in pred if d.grade == g]
        order = _rank(dets)
        assigned = _greedy_match([c.box for c in cells], [d.box for d in dets], order, iou_thr)
        report.gt_count[g] = len(cells)
        report.ranked[g] = [(dets[i].confidence, assigned[i] is not None) for i in order]
        matched = {j for j in assigned if j is not None}
        report.unmatched_gt.extend(c.id for j, c in enumerate(cells) if j not in matched)
    report.unmatched_gt.sort()
    return report


def average_precision(report: MatchReport, grade) -> float:
    """
    area under the precision envelope over recall (all points)
    """
    n_gt = report.gt_count.get(grade, 0)
    if n_gt < 1:
        raise EIPHError(f"no ground truth of grade {grade}")
    flags = np.array([tp for _, tp in report.ranked.get(grade, [])], dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.where(mrec[1:] != mrec[:-1])[0]
    # one rectangle per run of constant envelope
    levels = mpre[i + 1]
    starts = np.flatnonzero(np.r_[True, levels[1:] != levels[:-1]])
    ends = np.r_[starts[1:], len(levels)] - 1
    return float(np.sum((mrec[i[ends] + 1] - mrec[i[starts]]) * levels[starts]))


def mean_average_precision(report: MatchReport) -> float:
    present = [g for g in GRADES if report.gt_count.get(g, 0) > 0]
    if not present:
        raise EIPHError("no ground truth in any grade")
    return float(np.mean([average_precision(report, g) for g in present]))


def _mean_score(items) -> float:
    # 100 x mean grade; an empty side scores 0
    return ths(grade_counts(items)).score if items else 0.0


def score_error(
    gt: AnnotationSet,
    pred: Sequence[Detection],
    plan: TilePlan,
    mode: ScoreErrorMode = ScoreErrorMode.Patch,
) -> Tuple[float, float]:
    """
    Returns:
      (mean, population sigma) of |THS(pred) - THS(gt)|, once for the
      slide or over every tile holding a cell center on either side
    """
    if not gt.cells:
        raise EIPHError("no cells to score")
    if ScoreErrorMode(mode) == ScoreErrorMode.Slide:
        return abs(_mean_score(pred) - _mean_score(gt.cells)), 0.0
    gt_index, pred_index = CellIndex(gt.cells), CellIndex(pred)
    errors = []
    for tile in plan.tiles:
        a, b = gt_index.centered_in(tile), pred_index.centered_in(tile)
        if a or b:
            errors.append(abs(_mean_score(b) - _mean_score(a)))
    if not errors:
        raise EIPHError("no tile of the plan holds a cell center")
    errors = np.asarray(errors, dtype=np.float64)
    return float(errors.mean()), float(errors.std())


##########################################
# confusion
##########################################
@dataclass(frozen=True)
class ConfusionMatrix:
    """rows: reference grade, columns: assigned grade"""

    counts: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.counts, dtype=np.int64)
        if m.shape != (N_GRADES, N_GRADES) or (m < 0).any():
            raise EIPHError(f"confusion must be a non-negative {N_GRADES}x{N_GRADES} matrix")
        object.__setattr__(self, "counts", m)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @staticmethod
    def zeros() -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((N_GRADES, N_GRADES), dtype=np.int64))

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def transition(self) -> np.ndarray:
        """row-stochastic form; a reference grade nobody rated keeps its grade"""
        m = self.row_normalized()
        empty = self.counts.sum(axis=1) == 0
        m[empty, empty] = 1.0
        return m

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.counts,
            index=[f"ref_{g}" for g in GRADES],
            columns=[f"assigned_{g}" for g in GRADES],
        )


def _confusion_of(pairs) -> ConfusionMatrix:
    m = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    for ref, assigned in pairs:
        m[ref, assigned] += 1
    return ConfusionMatrix(m)


def confusion(ratings: RatingTable, rater, session) -> ConfusionMatrix:
    g = ratings.gradings(rater, session)
    return _confusion_of((ratings.reference[c], v) for c, v in g.items())


def detection_confusion(gt: AnnotationSet, pred: Sequence[Detection], iou_thr=0.5) -> ConfusionMatrix:
    """
    grade confusion of the detections matched to a gt cell, ignoring grades
    while matching
    """
    cells = sorted(gt.cells, key=lambda c: c.id)
    order = _rank(pred)
    assigned = _greedy_match([c.box for c in cells], [d.box for d in pred], order, iou_thr)
    return _confusion_of(
        (cells[j].grade, pred[i].grade) for i, j in enumerate(assigned) if j is not None
    )


def adjacent_confusion(diag) -> np.ndarray:
    """
    row-stochastic confusion keeping `diag` on the diagonal and splitting
    the rest equally over the adjacent grades
    """
    if not 0 <= diag <= 1:
        raise EIPHError(f"diagonal mass must lie in [0,1], got {diag}")
    m = np.zeros((N_GRADES, N_GRADES))
    for g in GRADES:
        neighbours = [n for n in (g - 1, g + 1) if 0 <= n < N_GRADES]
        m[g, g] = diag
        for n in neighbours:
            m[g, n] = (1.0 - diag) / len(neighbours)
    return m


##########################################
# agreement
##########################################
def _aligned(a, b) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(a, Mapping) and isinstance(b, Mapping):
        if set(a) != set(b):
            raise EIPHError("gradings cover different cells")
        keys = sorted(a)
        a, b = [a[k] for k in keys], [b[k] for k in keys]
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise EIPHError(f"gradings differ in length: {a.size} != {b.size}")
    if a.size == 0:
        raise EIPHError("no gradings to compare")
    return a, b


def cohen_kappa(a, b) -> float:
    """
    Args:
      a, b: equal-length grade sequences, or cell -> grade maps over the same cells
    """
    a, b = _aligned(a, b)
    p_o = float(np.mean(a == b))
    pa = np.bincount(a, minlength=N_GRADES) / a.size
    pb = np.bincount(b, minlength=N_GRADES) / b.size
    p_e = float(np.dot(pa, pb))
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def fleiss_kappa(table) -> float:
    """
    Args:
      table: (cells, categories) counts, every row summing to the same n >= 2
    """
    data = np.asarray(table, dtype=np.int64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EIPHError("fleiss_kappa needs a non-empty 2-d count table")
    if (data < 0).any():
        raise EIPHError("rating counts must be non-negative")
    n_raters = data.sum(axis=1)
    if len(set(n_raters.tolist())) != 1:
        raise EIPHError("every cell must be rated by the same number of raters")
    n = int(n_raters[0])
    if n < 2:
        raise EIPHError(f"need at least 2 raters per cell, got {n}")
    p_j = data.sum(axis=0) / data.sum()
    p_i = ((data ** 2).sum(axis=1) - n) / (n * (n - 1))
    p_bar, p_e = float(p_i.mean()), float(np.dot(p_j, p_j))
    if p_e == 1.0:
        return 1.0
    return (p_bar - p_e) / (1.0 - p_e)


def rating_counts(ratings: RatingTable, session, raters=None) -> np.ndarray:
    """
    (cells, 5) counts of the grades the raters gave each cell in `session`
    """
    raters = ratings.raters if raters is None else raters
    cells = sorted({r.cell_id for r in ratings.records if r.session == session and r.rater_id in raters})
    row = {c: i for i, c in enumerate(cells)}
    table = np.zeros((len(cells), N_GRADES), dtype=np.int64)
    for r in ratings.records:
        if r.session == session and r.rater_id in raters:
            table[row[r.cell_id], r.grade] += 1
    return table


def concordance_and_f1(ratings: RatingTable, rater, session) -> Tuple[float, List[Optional[float]]]:
    """
    Returns:
      fraction of cells graded like the reference, and the per-grade F1
      (None where the reference has no cell of that grade, 0 when undefined)
    """
    g = ratings.gradings(rater, session)
    ref = np.array([ratings.reference[c] for c in g])
    got = np.array(list(g.values()))
    f1 = []
    for k in GRADES:
        n_ref, n_got = int((ref == k).sum()), int((got == k).sum())
        if n_ref == 0:
            f1.append(None)
            continue
        tp = int(((ref == k) & (got == k)).sum())
        if tp == 0:
            f1.append(0.0)
            continue
        p, r = tp / n_got, tp / n_ref
        f1.append(2 * p * r / (p + r))
    return float((ref == got).mean()), f1


def _stats(values) -> Dict[str, Optional[float]]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "sigma": None, "min": None, "max": None}
    return {"mean": float(v.mean()), "sigma": float(v.std()), "min": float(v.min()), "max": float(v.max())}


def _ths_of(grades) -> float:
    return ths(GradeCounts(tuple(np.bincount(np.asarray(grades, dtype=np.int64), minlength=N_GRADES)))).score


@eiph_timer
def agreement_summary(ratings: RatingTable) -> dict:
    """
    per session: rater concordance, per-grade F1 over raters, Fleiss' kappa
    of the panel and signed THS error of each rater against the reference;
    plus intra-observer concordance and Cohen's kappa between the sessions
    """
    summary = {"sessions": {}, "intra_observer": None}
    for s in ratings.sessions:
        raters = [r for r in ratings.raters if any(x.rater_id == r and x.session == s for x in ratings.records)]
        conc, f1s, ths_err = [], [], []
        for r in raters:
            c, f1 = concordance_and_f1(ratings, r, s)
            conc.append(c)
            f1s.append(f1)
            g = ratings.gradings(r, s)
            ths_err.append(_ths_of(list(g.values())) - _ths_of([ratings.reference[k] for k in g]))
        try:
            fleiss = fleiss_kappa(rating_counts(ratings, s, raters)) if len(raters) >= 2 else None
        except EIPHError:
            fleiss = None
        summary["sessions"][str(s)] = {
            "raters": raters,
            "concordance": _stats(conc),
            "f1": {str(k): _stats([f[k] for f in f1s]) for k in GRADES},
            "fleiss_kappa": fleiss,
            "score_error": _stats(ths_err),
        }
    both = [r for r in ratings.raters if all(
        any(x.rater_id == r and x.session == s for x in ratings.records) for s in (0, 1)
    )]
    if both:
        conc, kappas = [], []
        for r in both:
            a, b = ratings.gradings(r, 0), ratings.gradings(r, 1)
            common = sorted(set(a) & set(b))
            if not common:
                continue
            x = [a[c] for c in common]
            y = [b[c] for c in common]
            conc.append(float(np.mean(np.asarray(x) == np.asarray(y))))
            kappas.append(cohen_kappa(x, y))
        summary["intra_observer"] = {"raters": both, "concordance": _stats(conc), "cohen_kappa": _stats(kappas)}
    return summary


##########################################
# hypothetical detector
##########################################
@eiph_timer
def simulated_map_from_confusion(gt: AnnotationSet, conf, trials, rng, iou_thr=0.5) -> float:
    """
    every gt cell is detected with its own box and confidence 1 but graded
    by sampling its row of `conf`
    Returns:
      mAP averaged over `trials`
    """
    m = np.asarray(conf, dtype=np.float64)
    if m.shape != (N_GRADES, N_GRADES) or (m < 0).any() or np.abs(m.sum(axis=1) - 1).max() > 1e-9:
        raise EIPHError("confusion must be row-stochastic 5x5")
    if trials < 1:
        raise EIPHError(f"trials must be positive, got {trials}")
    cells = sorted(gt.cells, key=lambda c: c.id)
    cumulative = np.cumsum(m, axis=1)
    grades = np.array([c.grade for c in cells], dtype=np.int64)
    maps = []
    for _ in range(trials):
        u = rng.random(len(cells))
        labels = np.minimum((u[:, None] >= cumulative[grades]).sum(axis=1), N_GRADES - 1)
        pseudo = [Detection.certain(c.box, int(k), 1.0) for c, k in zip(cells, labels)]
        maps.append(mean_average_precision(match_detections(gt, pseudo, iou_thr)))
    return float(np.mean(maps))
