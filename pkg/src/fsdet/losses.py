"""Training losses for both detector stages.

Classification uses binary cross entropy on logits (each class scored
one-vs-rest); box regression uses smooth L1 on encoded deltas for
positive matches only. ``compute_loss`` is deterministic and sampling
free so small scenarios stay hand-checkable; ``training_loss`` adds the
usual balanced subsampling on top of the same arithmetic.

Boxes can be excluded from supervision in two ways: ``ignore_boxes``
(for example the surplus instances beyond the k-shot budget) contribute
neither positives nor negatives in either stage, while
``rpn_only_ignore_boxes`` (instances of other classes during a
class-specific pass) are hidden from the proposal stage but count as
negatives for the classifier head.
"""

from __future__ import annotations

import logging

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import boxes as boxlib
from .errors import ShapeError

logger = logging.getLogger(__name__)

IGNORE = -1


@dataclass(frozen=True)
class LossConfig:
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_pos_iou: float = 0.5
    smooth_l1_beta: float = 1.0
    rpn_reg_weight: float = 1.0
    roi_reg_weight: float = 1.0


@dataclass
class StageOutputs:
    """Raw head outputs for one stage plus the boxes they score.

    ``logits``: (N,) for binary heads or (N, K) for the multi-class head.
    ``deltas``: (N, 4). ``boxes``: (N, 4) anchors or proposals in pixels.
    """

    logits: torch.Tensor
    deltas: torch.Tensor
    boxes: np.ndarray


@dataclass
class ModelOutputs:
    rpn: StageOutputs
    roi: StageOutputs


@dataclass
class GroundTruth:
    """Supervision for one image pass.

    ``labels`` holds a class id per box; binary passes ignore it beyond
    bookkeeping. ``ignore_boxes`` are excluded from positives and
    negatives in both stages. ``rpn_only_ignore_boxes`` are excluded from
    the RPN but remain negatives for the RoI classifier.
    """

    boxes: np.ndarray
    labels: Optional[np.ndarray] = None
    ignore_boxes: Optional[np.ndarray] = None
    rpn_only_ignore_boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.boxes = boxlib.as_box_array(self.boxes)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != self.boxes.shape[0]:
                raise ShapeError("labels and boxes disagree in length")
        self.ignore_boxes = boxlib.as_box_array(
            self.ignore_boxes if self.ignore_boxes is not None else []
        )
        self.rpn_only_ignore_boxes = boxlib.as_box_array(
            self.rpn_only_ignore_boxes if self.rpn_only_ignore_boxes is not None else []
        )


@dataclass(frozen=True)
class LossReport:
    """Scalar loss components. ``total`` equals the left-to-right float
    sum rpn_cls + rpn_reg + roi_cls + roi_reg exactly."""

    rpn_cls: float
    rpn_reg: float
    roi_cls: float
    roi_reg: float
    total: float
    rpn_pos: int = 0
    rpn_neg: int = 0
    roi_pos: int = 0
    roi_neg: int = 0

    def as_row(self) -> list[float]:
        return [self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg, self.total]


def match_boxes(
    candidates: np.ndarray,
    gt_boxes: np.ndarray,
    pos_iou: float,
    neg_iou: float,
    ignore_boxes: Optional[np.ndarray] = None,
    force_match: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Label candidates against ground truth by IoU.

    Returns (labels, matched) where labels[i] is 1 (positive),
    0 (negative) or -1 (excluded) and matched[i] is the index of the
    assigned ground-truth box for positives, else -1.

    A candidate is positive when its best IoU reaches ``pos_iou``;
    negative below ``neg_iou``; excluded in between. With ``force_match``
    the single best candidate for each ground-truth box (ties broken by
    lowest index) is positive even below the threshold, provided it
    overlaps at all. Candidates whose overlap with any ignore box reaches
    ``neg_iou`` are excluded unless a real match already made them
    positive.
    """
    cand = boxlib.as_box_array(candidates)
    gt = boxlib.as_box_array(gt_boxes)
    n = cand.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels, matched

    if gt.shape[0] > 0:
        overlaps = boxlib.iou_matrix(cand, gt)
        best = overlaps.max(axis=1)
        best_gt = overlaps.argmax(axis=1)
        labels[(best >= neg_iou) & (best < pos_iou)] = IGNORE
        pos = best >= pos_iou
        labels[pos] = 1
        matched[pos] = best_gt[pos]
        if force_match:
            for g in range(gt.shape[0]):
                col = overlaps[:, g]
                top = float(col.max())
                if top <= 0.0:
                    continue
                i = int(col.argmax())
                labels[i] = 1
                matched[i] = g

    ign = boxlib.as_box_array(ignore_boxes if ignore_boxes is not None else [])
    if ign.shape[0] > 0:
        olap = boxlib.iou_matrix(cand, ign).max(axis=1)
        labels[(labels != 1) & (olap >= neg_iou)] = IGNORE
    return labels, matched


@dataclass(frozen=True)
class BalancedSampler:
    """Caps how many labeled candidates feed the classification loss.

    Keeps at most ``batch_size`` candidates at roughly
    ``positive_fraction`` positives; the surplus is relabeled as
    excluded. Selection among equals is drawn from the provided rng, so
    a seeded generator makes training repeatable.
    """

    batch_size: int = 64
    positive_fraction: float = 0.5

    def subsample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = labels.copy()
        pos_idx = np.flatnonzero(out == 1)
        neg_idx = np.flatnonzero(out == 0)
        max_pos = int(round(self.batch_size * self.positive_fraction))
        if pos_idx.size > max_pos:
            drop = rng.choice(pos_idx, size=pos_idx.size - max_pos, replace=False)
            out[np.sort(drop)] = IGNORE
            pos_idx = np.flatnonzero(out == 1)
        max_neg = self.batch_size - pos_idx.size
        if neg_idx.size > max_neg:
            drop = rng.choice(neg_idx, size=neg_idx.size - max_neg, replace=False)
            out[np.sort(drop)] = IGNORE
        return out


def _bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="mean")


def _stage_losses(
    stage: StageOutputs,
    labels: np.ndarray,
    matched: np.ndarray,
    gt: GroundTruth,
    beta: float,
    multiclass: bool,
) -> tuple[torch.Tensor, torch.Tensor, int, int]:
    """(cls_loss, reg_loss, n_pos, n_neg) for one stage."""
    device = stage.logits.device
    zero = torch.zeros((), dtype=torch.float32, device=device)
    use = np.flatnonzero(labels != IGNORE)
    pos = np.flatnonzero(labels == 1)
    n_pos, n_neg = int(pos.size), int((labels == 0).sum())

    if use.size == 0:
        cls_loss = zero
    elif multiclass:
        if stage.logits.ndim != 2:
            raise ShapeError("multi-class stage expects (N, K) logits")
        if gt.labels is None:
            raise ShapeError("multi-class supervision requires per-box labels")
        k = stage.logits.shape[1]
        targets = torch.zeros((use.size, k), dtype=torch.float32, device=device)
        for row, i in enumerate(use):
            if labels[i] == 1:
                cls = int(gt.labels[matched[i]])
                if not 0 <= cls < k:
                    raise ShapeError(f"class id {cls} outside head range {k}")
                targets[row, cls] = 1.0
        cls_loss = _bce(stage.logits[torch.as_tensor(use, device=device)], targets)
    else:
        if stage.logits.ndim != 1:
            raise ShapeError("binary stage expects (N,) logits")
        targets = torch.as_tensor(
            (labels[use] == 1).astype(np.float32), device=device
        )
        cls_loss = _bce(stage.logits[torch.as_tensor(use, device=device)], targets)

    if pos.size == 0:
        reg_loss = zero
    else:
        target_boxes = gt.boxes[matched[pos]]
        enc = boxlib.encode_deltas(target_boxes, stage.boxes[pos])
        target = torch.as_tensor(enc.astype(np.float32), device=device)
        pred = stage.deltas[torch.as_tensor(pos, device=device)]
        reg_loss = F.smooth_l1_loss(pred, target, reduction="mean", beta=beta)
    return cls_loss, reg_loss, n_pos, n_neg


def training_loss(
    outputs: ModelOutputs,
    gt: GroundTruth,
    cfg: LossConfig = LossConfig(),
    sampler: Optional[BalancedSampler] = None,
    rng: Optional[np.random.Generator] = None,
    multiclass_roi: bool = False,
) -> tuple[torch.Tensor, LossReport]:
    """Differentiable total loss plus its per-component report.

    Matching happens here: RPN candidates are labeled against the
    positive boxes with force-matching so every instance owns at least
    one anchor; RoI candidates are labeled at the head thresholds. When a
    ``sampler`` is given it rebalances both stages (an rng is then
    required).
    """
    if sampler is not None and rng is None:
        raise ShapeError("a sampler needs an rng")
    if outputs.rpn.boxes.shape[0] == 0 and outputs.roi.boxes.shape[0] == 0:
        logger.warning("no candidate boxes in either stage; loss is zero")

    rpn_ignore = np.concatenate(
        [gt.ignore_boxes, gt.rpn_only_ignore_boxes], axis=0
    )
    rpn_labels, rpn_matched = match_boxes(
        outputs.rpn.boxes, gt.boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou,
        ignore_boxes=rpn_ignore, force_match=True,
    )
    roi_labels, roi_matched = match_boxes(
        outputs.roi.boxes, gt.boxes, cfg.roi_pos_iou, cfg.roi_pos_iou,
        ignore_boxes=gt.ignore_boxes, force_match=False,
    )
    if sampler is not None:
        rpn_labels = sampler.subsample(rpn_labels, rng)
        roi_labels = sampler.subsample(roi_labels, rng)

    rpn_cls, rpn_reg, rpn_pos, rpn_neg = _stage_losses(
        outputs.rpn, rpn_labels, rpn_matched, gt, cfg.smooth_l1_beta, multiclass=False
    )
    roi_cls, roi_reg, roi_pos, roi_neg = _stage_losses(
        outputs.roi, roi_labels, roi_matched, gt, cfg.smooth_l1_beta,
        multiclass=multiclass_roi,
    )
    rpn_reg = rpn_reg * cfg.rpn_reg_weight
    roi_reg = roi_reg * cfg.roi_reg_weight
    total = rpn_cls + rpn_reg + roi_cls + roi_reg

    c1, c2, c3, c4 = (float(v.detach()) for v in (rpn_cls, rpn_reg, roi_cls, roi_reg))
    report = LossReport(
        rpn_cls=c1, rpn_reg=c2, roi_cls=c3, roi_reg=c4,
        total=c1 + c2 + c3 + c4,
        rpn_pos=rpn_pos, rpn_neg=rpn_neg, roi_pos=roi_pos, roi_neg=roi_neg,
    )
    return total, report


def compute_loss(
    outputs: ModelOutputs,
    gt: GroundTruth,
    cfg: LossConfig = LossConfig(),
    multiclass_roi: bool = False,
) -> LossReport:
    """Sampling-free loss evaluation; every labeled candidate counts."""
    _, report = training_loss(outputs, gt, cfg, multiclass_roi=multiclass_roi)
    return report
