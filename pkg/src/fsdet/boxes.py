"""Axis-aligned box geometry: IoU, clipping, greedy NMS, delta coding.

Boxes are ``(x1, y1, x2, y2)`` rows in pixel units with a half-open
convention: a box covers the region ``[x1, x2) x [y1, y2)``, so its width
is ``x2 - x1``. All functions accept array-likes and work in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_box_array(boxes) -> np.ndarray:
    """Coerce to a float64 (N, 4) array; accepts (4,), lists, or (N, 4)."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ShapeError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def box_area(boxes) -> np.ndarray:
    b = as_box_array(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = as_box_array(a)
    b = as_box_array(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(box_a, box_b) -> float:
    """IoU of two single boxes."""
    return float(iou_matrix(box_a, box_b)[0, 0])


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    """Clamp box coordinates into [0, width] x [0, height]."""
    b = as_box_array(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def nms(boxes, scores, iou_thresh: float, class_ids=None) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in keep order.

    Candidates are visited by descending score; ties break deterministically
    by ascending (class_id, x1, y1, x2, y2). A candidate is suppressed when
    its IoU with any already-kept box exceeds ``iou_thresh`` (strict >, so a
    pair exactly at the threshold survives).
    """
    b = as_box_array(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if b.shape[0] != s.shape[0]:
        raise ShapeError("boxes and scores must align")
    if b.shape[0] == 0:
        return []
    cls = np.zeros(len(s)) if class_ids is None else np.asarray(class_ids, dtype=np.float64)
    # lexsort: last key is primary
    order = np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], cls, -s))
    keep: list[int] = []
    suppressed = np.zeros(b.shape[0], dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        overlaps = iou_matrix(b[idx], b)[0]
        suppressed |= overlaps > iou_thresh
    return keep


def encode_deltas(boxes, anchors) -> np.ndarray:
    """Encode target boxes as (dx, dy, dw, dh) offsets from anchors.

    dx, dy are center offsets in units of anchor width/height; dw, dh are
    log size ratios. Inverse of :func:`decode_deltas`.
    """
    boxes = as_box_array(boxes)
    anchors = as_box_array(anchors)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return np.stack(
        [(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_deltas(deltas, anchors) -> np.ndarray:
    """Apply (dx, dy, dw, dh) offsets to anchors, returning boxes."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = as_box_array(anchors)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
