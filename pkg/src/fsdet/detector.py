"""Compact two-stage detection backend: RPN plus RoI head.

The region proposal network scores a dense anchor grid over a feature map
and emits top-N proposals after decode, clip, and NMS. The RoI head pools
each proposal (RoIAlign), then classifies and refines it. In the few-shot
pipeline the backend runs once per class-specific feature map with a
binary (class-vs-background) head; baselines run it once on the general
features with a multi-class head. Per-class results are fused by
cross-class NMS.
"""

from __future__ import annotations

import json

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from . import boxes as boxlib
from .backbone import FeatureMap
from .errors import ShapeError

DEFAULT_FUSE_IOU = 0.5


@dataclass
class Proposal:
    """A class-agnostic candidate box with an objectness score."""

    box: np.ndarray  # (4,) x1, y1, x2, y2 in image pixels
    objectness: float


@dataclass
class Detection:
    """A scored, class-labeled bounding box."""

    box: np.ndarray  # (4,) x1, y1, x2, y2 in image pixels
    score: float
    class_id: int


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...] = (32.0, 64.0, 128.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)  # height / width
    pre_nms_top: int = 600
    post_nms_top: int = 100
    nms_iou: float = 0.7
    min_size: float = 1.0

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


def anchor_templates(cfg: AnchorConfig) -> np.ndarray:
    """(A, 4) zero-centered anchor boxes, scale-major then ratio order."""
    rows = []
    for scale in cfg.scales:
        for ratio in cfg.ratios:
            w = scale / np.sqrt(ratio)
            h = scale * np.sqrt(ratio)
            rows.append((-w / 2, -h / 2, w / 2, h / 2))
    return np.asarray(rows, dtype=np.float64)


def generate_anchors(cfg: AnchorConfig, feat_h: int, feat_w: int, stride: int) -> np.ndarray:
    """All anchors for a feature grid, cell-major then template order.

    Row index = (i * feat_w + j) * A + t for cell (i, j) and template t,
    matching the layout of flattened RPN head outputs.
    """
    templates = anchor_templates(cfg)
    ys = (np.arange(feat_h) + 0.5) * stride
    xs = (np.arange(feat_w) + 0.5) * stride
    cx, cy = np.meshgrid(xs, ys)  # (h, w)
    centers = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    return (centers + templates.reshape(1, -1, 4)).reshape(-1, 4)


def valid_anchor_mask(anchors: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """True for anchors that intersect the image rectangle at all."""
    h, w = image_size
    a = boxlib.as_box_array(anchors)
    return (a[:, 0] < w) & (a[:, 2] > 0) & (a[:, 1] < h) & (a[:, 3] > 0)


class RPN(nn.Module):
    """Region proposal network over a single feature level."""

    def __init__(self, in_channels: int, anchors_per_cell: int = 9):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.objectness = nn.Conv2d(in_channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(in_channels, anchors_per_cell * 4, 1)
        self.anchors_per_cell = anchors_per_cell
        for m in (self.conv, self.objectness, self.deltas):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, h, w) -> logits (B, h*w*A) and deltas (B, h*w*A, 4),
        flattened cell-major to match :func:`generate_anchors`."""
        b, _, h, w = feats.shape
        x = F.relu(self.conv(feats))
        logits = self.objectness(x).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.deltas(x).permute(0, 2, 3, 1).reshape(b, h * w * self.anchors_per_cell, 4)
        return logits, deltas

    @torch.no_grad()
    def propose(self, features: FeatureMap, anchors_cfg: AnchorConfig) -> list[Proposal]:
        """Top-N proposals: score sort, decode, clip, NMS.

        Anchors with no overlap with the image are excluded before scoring.
        """
        vals = features.values
        if vals.ndim != 3:
            raise ShapeError(f"expected (C, H, W) features, got {tuple(vals.shape)}")
        logits, deltas = self.forward(vals.unsqueeze(0))
        return self.proposals_from_outputs(
            logits[0], deltas[0], features, anchors_cfg
        )

    @torch.no_grad()
    def proposals_from_outputs(
        self,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        features: FeatureMap,
        anchors_cfg: AnchorConfig,
    ) -> list[Proposal]:
        h, w = features.values.shape[1:]
        anchors = generate_anchors(anchors_cfg, h, w, features.stride)
        scores = torch.sigmoid(logits).cpu().numpy().astype(np.float64)
        offs = deltas.cpu().numpy().astype(np.float64)

        keep = valid_anchor_mask(anchors, features.image_size)
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            return []
        order = idx[np.argsort(-scores[idx], kind="stable")][: anchors_cfg.pre_nms_top]
        decoded = boxlib.decode_deltas(offs[order], anchors[order])
        img_h, img_w = features.image_size
        decoded = boxlib.clip_boxes(decoded, img_w, img_h)
        big = ((decoded[:, 2] - decoded[:, 0]) >= anchors_cfg.min_size) & (
            (decoded[:, 3] - decoded[:, 1]) >= anchors_cfg.min_size
        )
        decoded = decoded[big]
        kept_scores = scores[order][big]
        picks = boxlib.nms(decoded, kept_scores, anchors_cfg.nms_iou)[: anchors_cfg.post_nms_top]
        return [Proposal(box=decoded[i], objectness=float(kept_scores[i])) for i in picks]


class RoIHead(nn.Module):
    """Per-proposal classifier and box refiner on pooled RoI features.

    ``num_classes=1`` gives the binary class-vs-background head used with
    class-specific feature maps; larger values give the multi-class head
    used by the plain baselines. Box refinement is class-agnostic.
    """

    def __init__(self, in_channels: int, num_classes: int = 1, pool_size: int = 7,
                 hidden: int = 256):
        super().__init__()
        self.pool_size = pool_size
        self.num_classes = num_classes
        in_dim = in_channels * pool_size * pool_size
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes)
        self.reg = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.zeros_(self.cls.bias)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.reg.bias)

    def forward(
        self, feats: torch.Tensor, rois: torch.Tensor, stride: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """feats (B, C, h, w); rois (R, 5) rows of (batch_idx, x1, y1, x2, y2)
        in image pixels. Returns logits (R, K) and deltas (R, 4)."""
        pooled = roi_align(
            feats, rois, output_size=self.pool_size, spatial_scale=1.0 / stride,
            sampling_ratio=2, aligned=True,
        )
        x = pooled.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.reg(x)

    @torch.no_grad()
    def detect(
        self,
        features: FeatureMap,
        proposals: Sequence[Proposal],
        class_id: int,
        nms_iou: float = 0.5,
        score_thresh: float = 0.05,
        max_dets: int = 50,
    ) -> list[Detection]:
        """Score proposals as class-vs-background on a class-specific map."""
        if self.num_classes != 1:
            raise ShapeError("detect() requires a binary head; use detect_multiclass()")
        if not proposals:
            return []
        logits, deltas = self._run(features, proposals)
        scores = torch.sigmoid(logits[:, 0]).numpy().astype(np.float64)
        return self._postprocess(
            features, proposals, scores, deltas.numpy(), class_id,
            nms_iou, score_thresh, max_dets,
        )

    @torch.no_grad()
    def detect_multiclass(
        self,
        features: FeatureMap,
        proposals: Sequence[Proposal],
        class_ids: Sequence[int],
        nms_iou: float = 0.5,
        score_thresh: float = 0.05,
        max_dets: int = 50,
    ) -> dict[int, list[Detection]]:
        """One-vs-rest scores per class from the multi-class head."""
        out = {int(c): [] for c in class_ids}
        if not proposals:
            return out
        logits, deltas = self._run(features, proposals)
        probs = torch.sigmoid(logits).numpy().astype(np.float64)
        for c in class_ids:
            if not 0 <= c < self.num_classes:
                raise ShapeError(f"class id {c} outside head range {self.num_classes}")
            out[int(c)] = self._postprocess(
                features, proposals, probs[:, c], deltas.numpy(), int(c),
                nms_iou, score_thresh, max_dets,
            )
        return out

    def _run(self, features: FeatureMap, proposals: Sequence[Proposal]):
        pboxes = np.stack([p.box for p in proposals])
        rois = torch.zeros((len(proposals), 5), dtype=torch.float32)
        rois[:, 1:] = torch.from_numpy(pboxes.astype(np.float32))
        return self.forward(features.values.unsqueeze(0), rois, features.stride)

    def _postprocess(
        self, features, proposals, scores, deltas, class_id,
        nms_iou, score_thresh, max_dets,
    ) -> list[Detection]:
        pboxes = np.stack([p.box for p in proposals])
        refined = boxlib.decode_deltas(deltas.astype(np.float64), pboxes)
        img_h, img_w = features.image_size
        refined = boxlib.clip_boxes(refined, img_w, img_h)
        ok = (
            (refined[:, 2] - refined[:, 0]) >= 1.0
        ) & ((refined[:, 3] - refined[:, 1]) >= 1.0) & (scores >= score_thresh)
        refined, scores = refined[ok], scores[ok]
        if refined.shape[0] == 0:
            return []
        picks = boxlib.nms(refined, scores, nms_iou)[:max_dets]
        return [
            Detection(box=refined[i], score=float(scores[i]), class_id=class_id)
            for i in picks
        ]


def write_detections_jsonl(
    path,
    per_image: Mapping[str, Sequence[Detection]],
    class_names: Mapping[int, str] | None = None,
) -> None:
    """Export detections as JSON lines: image_id, class_name, score, box."""
    with open(path, "w") as fh:
        for image_id in sorted(per_image):
            for det in per_image[image_id]:
                name = (
                    class_names[det.class_id]
                    if class_names is not None
                    else str(det.class_id)
                )
                fh.write(json.dumps({
                    "image_id": image_id,
                    "class_name": name,
                    "score": det.score,
                    "box": [float(v) for v in det.box],
                }, sort_keys=True) + "\n")


def fuse_results(
    per_class: Mapping[int, Sequence[Detection]],
    iou_thresh: float = DEFAULT_FUSE_IOU,
    mode: str = "cross_class_nms",
) -> list[Detection]:
    """Fuse per-class detection lists into one result list.

    ``cross_class_nms``: concatenate, then greedy NMS across classes so the
    higher-scored of two overlapping boxes survives regardless of class.
    ``concat_only``: deterministic ordering, no suppression. Both orders by
    (score desc, class_id asc, box lexicographic asc).
    """
    flat: list[Detection] = [d for dets in per_class.values() for d in dets]
    if not flat:
        return []
    arr = np.stack([d.box for d in flat])
    scores = np.asarray([d.score for d in flat])
    classes = np.asarray([d.class_id for d in flat])
    if mode == "concat_only":
        order = np.lexsort((arr[:, 3], arr[:, 2], arr[:, 1], arr[:, 0], classes, -scores))
        return [flat[i] for i in order]
    if mode != "cross_class_nms":
        raise ShapeError(f"unknown fusion mode {mode!r}")
    picks = boxlib.nms(arr, scores, iou_thresh, class_ids=classes)
    return [flat[i] for i in picks]
