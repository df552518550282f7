"""Loss arithmetic: matching bands, balanced sampling, BCE + smooth L1."""

import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fsdet.boxes import encode_deltas
from fsdet.errors import ShapeError
from fsdet.losses import (
    BalancedSampler,
    GroundTruth,
    LossConfig,
    LossReport,
    ModelOutputs,
    StageOutputs,
    compute_loss,
    match_boxes,
    training_loss,
)

GT_BOX = np.array([[10.0, 10.0, 30.0, 30.0]])
FAR_BOX = np.array([[60.0, 60.0, 80.0, 80.0]])


def _two_box_outputs(rpn_logits, rpn_deltas, roi_logits, roi_deltas):
    boxes = np.concatenate([GT_BOX, FAR_BOX])
    return ModelOutputs(
        rpn=StageOutputs(logits=torch.tensor(rpn_logits),
                         deltas=torch.tensor(rpn_deltas), boxes=boxes),
        roi=StageOutputs(logits=torch.tensor(roi_logits),
                         deltas=torch.tensor(roi_deltas), boxes=boxes),
    )


# --------------------------------------------------------------------- #
# frozen scenario
#
# One GT box; anchor/proposal 0 coincides with it (positive, encoded target
# all zeros), anchor/proposal 1 is disjoint (negative). Expected values were
# computed independently with plain double-precision formulas:
#   BCE(x, 1) = log(1 + exp(-x)), BCE(x, 0) = log(1 + exp(x)),
#   smooth L1 (beta 1) of |d| < 1 is d^2 / 2, averaged over 4 coordinates.


def test_frozen_two_anchor_scenario():
    outputs = _two_box_outputs(
        rpn_logits=[2.0, -1.0],
        rpn_deltas=[[0.1, -0.2, 0.05, 0.0], [0.3, 0.3, 0.3, 0.3]],
        roi_logits=[1.5, -0.8],
        roi_deltas=[[0.0, 0.1, -0.1, 0.2], [0.5, 0.5, 0.5, 0.5]],
    )
    report = compute_loss(outputs, GroundTruth(boxes=GT_BOX))
    assert report.rpn_cls == pytest.approx(0.2200948492805977, abs=1e-6)
    assert report.rpn_reg == pytest.approx(0.0065625, abs=1e-6)
    assert report.roi_cls == pytest.approx(0.28625697196526506, abs=1e-6)
    assert report.roi_reg == pytest.approx(0.0075, abs=1e-6)
    assert report.total == pytest.approx(0.5204143212458627, abs=1e-6)
    assert (report.rpn_pos, report.rpn_neg) == (1, 1)
    assert (report.roi_pos, report.roi_neg) == (1, 1)


def test_perfect_predictions_drive_losses_down():
    outputs = _two_box_outputs(
        rpn_logits=[12.0, -12.0],
        rpn_deltas=[[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]],
        roi_logits=[12.0, -12.0],
        roi_deltas=[[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]],
    )
    report = compute_loss(outputs, GroundTruth(boxes=GT_BOX))
    assert report.rpn_reg == 0.0
    assert report.roi_reg == 0.0
    assert report.rpn_cls < 1e-4
    assert report.roi_cls < 1e-4


def test_uniform_logits_cost_ln2():
    zeros4 = [[0.0] * 4, [0.0] * 4]
    outputs = _two_box_outputs([0.0, 0.0], zeros4, [0.0, 0.0], zeros4)
    report = compute_loss(outputs, GroundTruth(boxes=GT_BOX))
    assert report.rpn_cls == pytest.approx(math.log(2.0), rel=1e-6)
    assert report.roi_cls == pytest.approx(math.log(2.0), rel=1e-6)


def test_total_is_exact_component_sum():
    outputs = _two_box_outputs(
        rpn_logits=[0.7, -0.3],
        rpn_deltas=[[0.2, 0.0, -0.4, 0.1], [0.0] * 4],
        roi_logits=[1.1, 0.4],
        roi_deltas=[[-0.2, 0.3, 0.0, 0.0], [0.0] * 4],
    )
    r = compute_loss(outputs, GroundTruth(boxes=GT_BOX))
    assert r.total == ((r.rpn_cls + r.rpn_reg) + r.roi_cls) + r.roi_reg
    assert r.as_row() == [r.rpn_cls, r.rpn_reg, r.roi_cls, r.roi_reg, r.total]


def test_nonzero_encoded_regression_target():
    # positive anchor offset from its GT: target deltas are the encoding
    anchor = np.array([[8.0, 12.0, 28.0, 32.0]])  # IoU with GT high enough
    gt = GroundTruth(boxes=GT_BOX)
    enc = encode_deltas(GT_BOX, anchor)
    outputs = ModelOutputs(
        rpn=StageOutputs(logits=torch.tensor([4.0]),
                         deltas=torch.tensor(enc, dtype=torch.float32),
                         boxes=anchor),
        roi=StageOutputs(logits=torch.tensor([4.0]),
                         deltas=torch.zeros((1, 4)), boxes=anchor),
    )
    report = compute_loss(outputs, gt)
    assert report.rpn_reg == pytest.approx(0.0, abs=1e-9)
    assert report.roi_reg > 0.0


# --------------------------------------------------------------------- #
# matching


def test_match_boxes_bands():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    cands = np.array([
        [0.0, 0.0, 10.0, 10.0],   # IoU 1.0 -> positive
        [0.0, 0.0, 10.0, 5.0],    # IoU 0.5 -> between the bands -> excluded
        [20.0, 20.0, 30.0, 30.0],  # IoU 0.0 -> negative
    ])
    labels, matched = match_boxes(cands, gt, pos_iou=0.7, neg_iou=0.3)
    assert labels.tolist() == [1, -1, 0]
    assert matched.tolist() == [0, -1, -1]


def test_match_boxes_force_match_promotes_best():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    cands = np.array([
        [0.0, 0.0, 6.0, 10.0],     # IoU 0.6, below pos threshold
        [40.0, 40.0, 50.0, 50.0],  # disjoint
    ])
    plain, _ = match_boxes(cands, gt, pos_iou=0.7, neg_iou=0.3)
    assert plain.tolist() == [-1, 0]
    forced, matched = match_boxes(cands, gt, pos_iou=0.7, neg_iou=0.3,
                                  force_match=True)
    assert forced.tolist() == [1, 0]
    assert matched[0] == 0


def test_match_boxes_force_match_needs_overlap():
    gt = np.array([[100.0, 100.0, 120.0, 120.0]])
    cands = np.array([[0.0, 0.0, 10.0, 10.0]])
    labels, _ = match_boxes(cands, gt, pos_iou=0.7, neg_iou=0.3, force_match=True)
    assert labels.tolist() == [0]  # nothing touches the GT; no fake positive


def test_match_boxes_ignore_regions():
    ignore = np.array([[0.0, 0.0, 12.0, 12.0]])
    cands = np.array([
        [0.0, 0.0, 10.0, 10.0],    # overlaps the ignore region -> excluded
        [40.0, 40.0, 50.0, 50.0],  # clear of it -> negative
    ])
    labels, _ = match_boxes(cands, np.zeros((0, 4)), pos_iou=0.7, neg_iou=0.3,
                            ignore_boxes=ignore)
    assert labels.tolist() == [-1, 0]


def test_match_boxes_positive_wins_over_ignore():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    ignore = np.array([[0.0, 0.0, 12.0, 12.0]])
    labels, _ = match_boxes(gt.copy(), gt, pos_iou=0.7, neg_iou=0.3,
                            ignore_boxes=ignore)
    assert labels.tolist() == [1]


def test_match_boxes_empty_candidates():
    labels, matched = match_boxes(np.zeros((0, 4)), GT_BOX, 0.7, 0.3)
    assert labels.shape == (0,) and matched.shape == (0,)


# --------------------------------------------------------------------- #
# rpn-only ignore vs full ignore


def test_rpn_only_ignore_stays_roi_negative():
    # candidate 1 sits on an other-class box: the proposal stage must not
    # treat it as background, but the classifier head still scores it 0
    gt = GroundTruth(boxes=GT_BOX, rpn_only_ignore_boxes=FAR_BOX)
    outputs = _two_box_outputs([0.0, 0.0], [[0.0] * 4] * 2,
                               [0.0, 0.0], [[0.0] * 4] * 2)
    report = compute_loss(outputs, gt)
    assert (report.rpn_pos, report.rpn_neg) == (1, 0)
    assert (report.roi_pos, report.roi_neg) == (1, 1)


def test_full_ignore_drops_both_stages():
    gt = GroundTruth(boxes=GT_BOX, ignore_boxes=FAR_BOX)
    outputs = _two_box_outputs([0.0, 0.0], [[0.0] * 4] * 2,
                               [0.0, 0.0], [[0.0] * 4] * 2)
    report = compute_loss(outputs, gt)
    assert (report.rpn_pos, report.rpn_neg) == (1, 0)
    assert (report.roi_pos, report.roi_neg) == (1, 0)


# --------------------------------------------------------------------- #
# balanced sampling


def test_sampler_caps_positives_and_batch():
    labels = np.array([1] * 20 + [0] * 40)
    rng = np.random.default_rng(0)
    out = BalancedSampler(batch_size=16, positive_fraction=0.5).subsample(labels, rng)
    assert (out == 1).sum() == 8
    assert (out == 0).sum() == 8
    assert (out != -1).sum() == 16
    assert labels.tolist() == [1] * 20 + [0] * 40  # input untouched


def test_sampler_fills_with_negatives_when_positives_scarce():
    labels = np.array([1] * 3 + [0] * 50)
    rng = np.random.default_rng(1)
    out = BalancedSampler(batch_size=16, positive_fraction=0.5).subsample(labels, rng)
    assert (out == 1).sum() == 3
    assert (out == 0).sum() == 13


def test_sampler_deterministic_under_seed():
    labels = np.array([1] * 10 + [0] * 90)
    sampler = BalancedSampler(batch_size=8, positive_fraction=0.25)
    a = sampler.subsample(labels, np.random.default_rng(7))
    b = sampler.subsample(labels, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


@settings(deadline=None, max_examples=40)
@given(st.lists(st.sampled_from([-1, 0, 1]), min_size=1, max_size=200),
       st.integers(min_value=1, max_value=64))
def test_sampler_only_demotes(raw, batch):
    labels = np.asarray(raw, dtype=np.int64)
    out = BalancedSampler(batch_size=batch, positive_fraction=0.5).subsample(
        labels, np.random.default_rng(3)
    )
    assert (out != -1).sum() <= batch
    # labels only ever move toward exclusion
    changed = out != labels
    assert np.all(out[changed] == -1)
    assert np.all(labels[out == 1] == 1)
    assert np.all(labels[out == 0] == 0)


def test_training_loss_sampler_requires_rng():
    outputs = _two_box_outputs([0.0, 0.0], [[0.0] * 4] * 2,
                               [0.0, 0.0], [[0.0] * 4] * 2)
    with pytest.raises(ShapeError):
        training_loss(outputs, GroundTruth(boxes=GT_BOX),
                      sampler=BalancedSampler())


def test_training_loss_grad_flows():
    logits = torch.zeros(2, requires_grad=True)
    boxes = np.concatenate([GT_BOX, FAR_BOX])
    outputs = ModelOutputs(
        rpn=StageOutputs(logits=logits, deltas=torch.zeros(2, 4), boxes=boxes),
        roi=StageOutputs(logits=torch.zeros(2), deltas=torch.zeros(2, 4), boxes=boxes),
    )
    total, report = training_loss(outputs, GroundTruth(boxes=GT_BOX))
    total.backward()
    assert logits.grad is not None and torch.any(logits.grad != 0)
    assert float(total.detach()) == pytest.approx(report.total, abs=1e-6)


# --------------------------------------------------------------------- #
# degenerate inputs


def test_no_candidates_warns_and_reports_zero(caplog):
    empty = StageOutputs(logits=torch.zeros(0), deltas=torch.zeros(0, 4),
                         boxes=np.zeros((0, 4)))
    outputs = ModelOutputs(rpn=empty, roi=empty)
    with caplog.at_level(logging.WARNING, logger="fsdet.losses"):
        report = compute_loss(outputs, GroundTruth(boxes=GT_BOX))
    assert report.total == 0.0
    assert any("no candidate boxes" in r.message for r in caplog.records)


def test_ground_truth_label_length_mismatch():
    with pytest.raises(ShapeError):
        GroundTruth(boxes=GT_BOX, labels=np.array([0, 1]))


# --------------------------------------------------------------------- #
# multi-class head


def _multiclass_outputs(roi_logits):
    boxes = np.concatenate([GT_BOX, FAR_BOX])
    return ModelOutputs(
        rpn=StageOutputs(logits=torch.zeros(2), deltas=torch.zeros(2, 4),
                         boxes=boxes),
        roi=StageOutputs(logits=roi_logits, deltas=torch.zeros(2, 4), boxes=boxes),
    )


def test_multiclass_one_hot_targets():
    # zero logits, 4-way head: every element costs ln 2 regardless of target
    outputs = _multiclass_outputs(torch.zeros(2, 4))
    gt = GroundTruth(boxes=GT_BOX, labels=np.array([2]))
    report = compute_loss(outputs, gt, multiclass_roi=True)
    assert report.roi_cls == pytest.approx(math.log(2.0), rel=1e-6)

    # strong logit on the right class, strongly negative elsewhere
    logits = torch.full((2, 4), -12.0)
    logits[0, 2] = 12.0
    report = compute_loss(_multiclass_outputs(logits), gt, multiclass_roi=True)
    assert report.roi_cls < 1e-4


def test_multiclass_requires_labels_and_2d_logits():
    gt_nolabels = GroundTruth(boxes=GT_BOX)
    with pytest.raises(ShapeError):
        compute_loss(_multiclass_outputs(torch.zeros(2, 4)), gt_nolabels,
                     multiclass_roi=True)
    gt = GroundTruth(boxes=GT_BOX, labels=np.array([2]))
    with pytest.raises(ShapeError):
        compute_loss(_multiclass_outputs(torch.zeros(2)), gt, multiclass_roi=True)


def test_multiclass_label_outside_head():
    gt = GroundTruth(boxes=GT_BOX, labels=np.array([7]))
    with pytest.raises(ShapeError):
        compute_loss(_multiclass_outputs(torch.zeros(2, 4)), gt,
                     multiclass_roi=True)


def test_binary_stage_rejects_2d_logits():
    outputs = _two_box_outputs([0.0, 0.0], [[0.0] * 4] * 2,
                               [0.0, 0.0], [[0.0] * 4] * 2)
    outputs.rpn.logits = torch.zeros(2, 3)
    with pytest.raises(ShapeError):
        compute_loss(outputs, GroundTruth(boxes=GT_BOX))
