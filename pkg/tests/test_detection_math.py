import math

import numpy as np
import pytest
import torch

from pyeiph.core_model import *
from pyeiph.detection_math import *


def test_iou_cases():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 5, 5)) == 0.0
    b = BoundingBox(5, 5, 10, 10)
    assert iou(a, b) == pytest.approx(25 / 175)
    assert iou(a, b) == iou(b, a)
    assert float(pairwise_iou([a], [b])[0, 0]) == pytest.approx(25 / 175)


def test_anchor_count_and_geometry():
    assert len(generate_anchors(1024, 1024)) == 32 * 32 * 9
    one = generate_anchors(32, 32, AnchorConfig(scales=(1.0,), ratios=(1.0,)))
    assert len(one) == 1
    assert one[0].center == pytest.approx((16.0, 16.0))
    assert (one[0].w, one[0].h) == pytest.approx((32.0, 32.0))
    wide = generate_anchors(32, 32, AnchorConfig(scales=(1.0,), ratios=(2.0,)))[0]
    assert wide.w == pytest.approx(2 * wide.h)
    assert abs(wide.area - 32.0 ** 2) < 1


def test_partial_stride_gets_no_anchors():
    assert len(generate_anchors(70, 40, AnchorConfig(scales=(1.0,), ratios=(1.0,)))) == 2


def test_match_anchors():
    gt = [CellAnnotation(4, BoundingBox(0, 0, 10, 10), 2)]
    anchors = [
        BoundingBox(0, 0, 10, 10),
        BoundingBox(0, 0, 4.5, 10),  # iou 0.45
        BoundingBox(500, 500, 10, 10),
    ]
    targets = match_anchors(anchors, gt)
    assert targets[0] == AnchorTarget(MatchKind.Positive, 4)
    assert targets[1].kind == MatchKind.Ignore
    assert targets[2].kind == MatchKind.Background


def test_match_ties_go_to_lowest_gt_id():
    box = BoundingBox(0, 0, 10, 10)
    gt = [CellAnnotation(9, box, 1), CellAnnotation(2, box, 3)]
    assert match_anchors([box], gt)[0] == AnchorTarget(MatchKind.Positive, 2)


def test_gt_without_positive_is_force_assigned():
    gt = [CellAnnotation(1, BoundingBox(0, 0, 10, 10), 0)]
    anchors = [BoundingBox(0, 0, 3, 10), BoundingBox(0, 0, 4, 10)]
    targets = match_anchors(anchors, gt)
    assert targets[0].kind == MatchKind.Background
    assert targets[1] == AnchorTarget(MatchKind.Positive, 1)


def test_match_without_gt():
    anchors = generate_anchors(64, 64, AnchorConfig(scales=(1.0,), ratios=(1.0,)))
    assert all(t.kind == MatchKind.Background for t in match_anchors(anchors, []))


def _det(x, conf, grade=1, w=10):
    return Detection.certain(BoundingBox(x, 0, w, 10), grade, conf)


def test_nms_cases():
    a, b = _det(0, 0.9), _det(0, 0.8)
    assert nms([b, a], 0.5) == [a]
    far = _det(100, 0.5)
    assert nms([a, far], 0.5) == [a, far]
    # A~B 0.6, B~C 0.6, A~C 1/3
    A, B, C = _det(0, 0.9), _det(2.5, 0.8), _det(5, 0.7)
    assert nms([C, B, A], 0.5) == [A, C]


def test_nms_is_class_wise_and_idempotent():
    rng = np.random.default_rng(0)
    dets = [
        Detection.certain(
            BoundingBox(float(x), float(y), 20, 20), int(g), float(c)
        )
        for x, y, g, c in zip(
            rng.integers(0, 60, 40), rng.integers(0, 60, 40), rng.integers(0, 5, 40), rng.random(40)
        )
    ]
    once = nms(dets, 0.5)
    assert nms(once, 0.5) == once
    same_box = [_det(0, 0.9, grade=1), _det(0, 0.8, grade=2)]
    assert len(nms(same_box, 0.5)) == 2


def test_focal_loss_values():
    ce = FocalParams(alpha=1.0, gamma=0.0)
    assert focal_loss(0.5, ce) == pytest.approx(math.log(2))
    assert focal_loss(1.0) == 0.0
    assert focal_loss(0.9, FocalParams(0.25, 2.0)) == pytest.approx(0.25 * 0.01 * -math.log(0.9), rel=1e-12)
    with pytest.raises(EIPHError):
        focal_loss(0.0)


def test_focal_reduces_to_cross_entropy():
    ce = FocalParams(alpha=1.0, gamma=0.0)
    for p in np.linspace(1e-6, 1.0, 257):
        assert abs(focal_loss(float(p), ce) + math.log(p)) < 1e-12


def test_smooth_l1_and_mse():
    assert smooth_l1([1, 2], [1, 2]) == 0.0
    assert smooth_l1([0.5], [0.0]) == pytest.approx(0.125)
    assert smooth_l1([2.0], [0.0]) == pytest.approx(1.5)
    # continuous at the kink
    assert smooth_l1([1.0], [0.0]) == pytest.approx(0.5)
    assert smooth_l1([1.0 - 1e-12], [0.0]) == pytest.approx(0.5)
    assert mse([0, 4], [1, 2]) == pytest.approx(2.5)
    assert mse([3.0, 3.0], [1.0, 1.0]) == pytest.approx(4.0)
    with pytest.raises(EIPHError):
        smooth_l1([], [])
    with pytest.raises(EIPHError):
        mse([1.0], [1.0, 2.0])


def test_scaled_sigmoid():
    assert scaled_sigmoid(0.0) == 2.0
    assert abs(scaled_sigmoid(20.0) - 4.5) < 1e-8
    assert scaled_sigmoid(-800.0) == pytest.approx(-0.5)
    assert scaled_sigmoid_inverse(2.0) == 0.0
    for z in (-4.0, -0.3, 1.7):
        assert scaled_sigmoid_inverse(scaled_sigmoid(z)) == pytest.approx(z, abs=1e-9)
    with pytest.raises(EIPHError):
        scaled_sigmoid_inverse(4.5)
    t = scaled_sigmoid(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(t, torch.full((3,), 2.0, dtype=torch.float64))


def test_grad_check_on_square():
    err = grad_check(lambda v: float((v ** 2).sum()), [3.0], [6.0])
    assert err < 1e-7
    with pytest.raises(EIPHError):
        grad_check(lambda v: float("nan"), [1.0], [0.0])


def test_focal_gradient():
    assert grad_check(lambda v: focal_loss(float(v[0])), [0.7], [focal_loss_grad(0.7)]) < 1e-4


def test_perfect_batch_has_zero_loss():
    probs = [[1.0, 0, 0, 0, 0], [0, 0, 0, 0, 0]]
    batch = LossBatch(
        class_probs=probs,
        class_targets=[0, BACKGROUND],
        box_pred=[[0.1, 0.2, 0.3, 0.4]],
        box_target=[[0.1, 0.2, 0.3, 0.4]],
        cell_score_pred=[1.0],
        cell_score_target=[1.0],
        patch_score_pred=[2.0],
        patch_score_target=[2.0],
    )
    assert total_loss(batch) == LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)


def test_classification_only_error():
    batch = LossBatch(class_probs=[[0.5, 0, 0, 0, 0]], class_targets=[0])
    out = total_loss(batch)
    assert out.total == out.focal == pytest.approx(focal_loss(0.5))
    assert (out.box, out.cell_score, out.patch_score) == (0.0, 0.0, 0.0)


def test_total_is_sum_of_terms():
    batch = random_loss_batch(np.random.default_rng(4))
    out = total_loss(batch)
    assert out.box == pytest.approx(smooth_l1(batch.box_pred, batch.box_target))
    assert out.cell_score == pytest.approx(mse(batch.cell_score_pred, batch.cell_score_target))
    assert out.patch_score == pytest.approx(mse(batch.patch_score_pred, batch.patch_score_target))
    assert out.total == pytest.approx(out.focal + out.box + out.cell_score + out.patch_score)
    assert out.total >= 0


def test_ignored_anchors_do_not_count():
    a = LossBatch(class_probs=[[0.5, 0, 0, 0, 0]], class_targets=[0])
    b = LossBatch(class_probs=[[0.5, 0, 0, 0, 0], [0.1, 0.1, 0.1, 0.1, 0.1]], class_targets=[0, IGNORE])
    assert total_loss(a).focal == pytest.approx(total_loss(b).focal)


def test_closed_form_matches_autograd():
    batch = random_loss_batch(np.random.default_rng(8))
    closed, auto = loss_gradients(batch), autograd_gradients(batch)
    for k in closed:
        assert torch.allclose(closed[k], auto[k], rtol=1e-9, atol=1e-12), k


def test_gradient_check_suite_passes():
    rows = gradient_check_suite(seed=0)
    failed = [r["check"] for r in rows if not r["passed"]]
    assert not failed
    assert {r["mode"] for r in rows} >= {"central", "forward", "backward"}


def test_loss_batch_rejects_bad_targets():
    with pytest.raises(EIPHError):
        LossBatch(class_probs=[[0.2] * 5], class_targets=[5])
    with pytest.raises(EIPHError):
        LossBatch(class_probs=[[0.2] * 5], class_targets=[0, 1])
