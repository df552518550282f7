"""Composite few-shot detector: backbone + highlighters + two-stage backend.

One image forward produces a shared feature map; each task class gets its
own highlighted copy of that map (support embedding -> exciting factors ->
depth-wise correlation) and a full RPN+RoI pass over it. The same weights
serve every class. Baselines reuse the identical backend with the
highlight stage disabled and a multi-class RoI head.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, FeatureMap, SupportEmbedding, normalize_raster
from .detector import AnchorConfig, Detection, Proposal, RoIHead, RPN, fuse_results
from .episodes import Episode
from .errors import MissingArtifactError, ShapeError, UsageError
from .highlight import HighlightModule, apply_highlight

CHECKPOINT_HEADER_KEY = "__header__"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Frozen so a checkpoint can embed it."""

    feature_channels: int = 64
    hidden1: int = 128
    hidden2: int = 96
    roi_hidden: int = 128
    num_classes: int = 1  # RoI head width; 1 = binary per-class head
    use_highlight: bool = True
    fine_activation: str = "sigmoid"
    fine_input: str = "coarse_factor"
    fusion: str = "cross_class_nms"
    fuse_iou: float = 0.5
    anchor_scales: tuple[float, ...] = (32.0, 64.0, 128.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def anchors(self) -> AnchorConfig:
        return AnchorConfig(scales=self.anchor_scales, ratios=self.anchor_ratios)


class FewShotDetector(nn.Module):
    """Weight-shared detector conditioned on per-class support crops."""

    def __init__(self, config: ModelConfig | None = None, init_seed: int = 0):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.backbone = Backbone(channels=cfg.feature_channels)
            if cfg.use_highlight:
                self.highlight = HighlightModule(
                    embed_dim=cfg.feature_channels,
                    feature_channels=cfg.feature_channels,
                    hidden1=cfg.hidden1,
                    hidden2=cfg.hidden2,
                    fine_activation=cfg.fine_activation,
                    fine_input=cfg.fine_input,
                )
            else:
                self.highlight = None
            self.rpn = RPN(cfg.feature_channels, self.config.anchors().per_cell)
            self.roi_head = RoIHead(
                cfg.feature_channels, num_classes=cfg.num_classes, hidden=cfg.roi_hidden
            )

    # ------------------------------------------------------------------ #
    # feature plumbing

    def query_features(self, pixels: np.ndarray) -> FeatureMap:
        return self.backbone.extract_features(pixels)

    def support_embeddings(self, episode: Episode) -> dict[int, SupportEmbedding]:
        """Embed each support crop through the same backbone (no extra
        parameters on the support path). Crops share one batched forward."""
        class_ids = sorted(episode.supports)
        for c in class_ids:
            patch = episode.supports[c].patch
            if patch.shape != (224, 224, 3):
                raise ShapeError(
                    f"support crop for class {c} must be 224x224x3, got {patch.shape}"
                )
        batch = torch.cat(
            [normalize_raster(episode.supports[c].patch) for c in class_ids], dim=0
        )
        embedded = self.backbone.embed_batch(batch)
        return {
            c: SupportEmbedding(values=embedded[i], class_id=c)
            for i, c in enumerate(class_ids)
        }

    def class_feature_maps(self, episode: Episode) -> dict[int, FeatureMap]:
        """Per-class highlighted feature maps for the episode's query image.

        With the highlight stage disabled every class shares the plain map.
        """
        base = self.query_features(episode.query.pixels)
        if self.highlight is None:
            return {c: base for c in episode.task_classes}
        embeddings = self.support_embeddings(episode)
        ordered = [embeddings[c] for c in sorted(embeddings)]
        return apply_highlight(base, ordered, self.highlight)

    # ------------------------------------------------------------------ #
    # inference

    @torch.no_grad()
    def detect(
        self,
        episode: Episode,
        score_thresh: float = 0.05,
        max_dets: int = 50,
    ) -> list[Detection]:
        """Full per-class detection pass plus fusion over the task classes."""
        was_training = self.training
        self.eval()
        try:
            cfg = self.config
            anchors = cfg.anchors()
            per_class: dict[int, list[Detection]] = {}
            if cfg.num_classes == 1:
                maps = self.class_feature_maps(episode)
                for class_id in sorted(maps):
                    feats = maps[class_id]
                    proposals = self.rpn.propose(feats, anchors)
                    per_class[class_id] = self.roi_head.detect(
                        feats, proposals, class_id,
                        score_thresh=score_thresh, max_dets=max_dets,
                    )
            else:
                feats = self.query_features(episode.query.pixels)
                proposals = self.rpn.propose(feats, anchors)
                per_class = self.roi_head.detect_multiclass(
                    feats, proposals, sorted(episode.task_classes),
                    score_thresh=score_thresh, max_dets=max_dets,
                )
            return fuse_results(per_class, iou_thresh=cfg.fuse_iou, mode=cfg.fusion)
        finally:
            if was_training:
                self.train()

    # ------------------------------------------------------------------ #
    # checkpoints

    def save(self, path, extra: dict | None = None) -> None:
        """Write weights plus the architecture header to an npz archive.

        ``extra`` merges additional JSON-serializable metadata (for example
        the training configuration) into the header.
        """
        payload = {"config": _config_dict(self.config)}
        if extra:
            payload.update(extra)
        header = json.dumps(payload, sort_keys=True)
        arrays = {
            name: tensor.detach().cpu().numpy()
            for name, tensor in self.state_dict().items()
        }
        arrays[CHECKPOINT_HEADER_KEY] = np.frombuffer(
            header.encode("utf-8"), dtype=np.uint8
        ).copy()
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, init_seed: int = 0) -> "FewShotDetector":
        try:
            archive = np.load(path, allow_pickle=False)
        except FileNotFoundError:
            raise MissingArtifactError(f"checkpoint not found: {path}")
        if CHECKPOINT_HEADER_KEY not in archive:
            raise MissingArtifactError(f"not a model checkpoint (no header): {path}")
        header = json.loads(bytes(archive[CHECKPOINT_HEADER_KEY]).decode("utf-8"))
        config = _config_from_dict(header["config"])
        model = cls(config, init_seed=init_seed)
        state = {
            name: torch.from_numpy(archive[name])
            for name in archive.files
            if name != CHECKPOINT_HEADER_KEY
        }
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise MissingArtifactError(
                f"checkpoint {path} does not match architecture "
                f"(missing={sorted(missing)}, unexpected={sorted(unexpected)})"
            )
        return model


def read_checkpoint_header(path) -> dict:
    """The JSON header embedded in a checkpoint archive."""
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise MissingArtifactError(f"checkpoint not found: {path}")
    if CHECKPOINT_HEADER_KEY not in archive:
        raise MissingArtifactError(f"not a model checkpoint (no header): {path}")
    return json.loads(bytes(archive[CHECKPOINT_HEADER_KEY]).decode("utf-8"))


def _config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["anchor_scales"] = list(cfg.anchor_scales)
    d["anchor_ratios"] = list(cfg.anchor_ratios)
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["anchor_scales"] = tuple(float(v) for v in d.get("anchor_scales", (32, 64, 128)))
    d["anchor_ratios"] = tuple(float(v) for v in d.get("anchor_ratios", (0.5, 1.0, 2.0)))
    return ModelConfig(**d)


def widen_head(model: FewShotDetector, num_classes: int, init_seed: int = 0) -> FewShotDetector:
    """Copy a model into one whose RoI head scores ``num_classes`` classes.

    Backbone, highlight, RPN, and the shared RoI trunk keep their weights;
    only the classification output layer is re-shaped (and re-initialized
    where no source row exists).
    """
    if num_classes < 1:
        raise UsageError("num_classes must be >= 1")
    new_cfg = _config_from_dict({**_config_dict(model.config), "num_classes": num_classes})
    new = FewShotDetector(new_cfg, init_seed=init_seed)
    src = model.state_dict()
    dst = new.state_dict()
    for name, tensor in src.items():
        if name not in dst:
            continue
        if dst[name].shape == tensor.shape:
            dst[name] = tensor.clone()
        elif name.startswith("roi_head.cls."):
            rows = min(dst[name].shape[0], tensor.shape[0])
            merged = dst[name].clone()
            merged[:rows] = tensor[:rows]
            dst[name] = merged
    new.load_state_dict(dst)
    return new
