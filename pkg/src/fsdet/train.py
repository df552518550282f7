"""Two-phase optimization plus the plain-detector baseline modes.

Phase one trains on abundant base-class data; phase two fine-tunes on a
set balanced to exactly k annotations per class over base and novel
classes together, with every parameter still trainable. The ``frcn_*``
modes train the same backend without the highlight stage and with a
multi-class head: ``frcn_few`` sees only k boxes for every class,
``frcn_joint`` sees abundant base data plus k-shot novel data in one
phase, and ``frcn_ft`` runs both phases like the main method.

Each optimization step consumes one or more episodes. For the
highlight-conditioned model every episode expands into one detection
pass per task class against that class's specialized feature map; the
baselines run a single multi-class pass on the general features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import FeatureMap
from .boxes import as_box_array
from .detector import AnchorConfig, generate_anchors, valid_anchor_mask
from .episodes import KShotSet, build_episode, sample_kshot
from .errors import ConfigError, SamplingError, TrainingDiverged
from .ingest import AnnotatedImage, ClassSplit, SupportCrop, build_support_pool
from .losses import (
    BalancedSampler,
    GroundTruth,
    LossConfig,
    LossReport,
    ModelOutputs,
    StageOutputs,
    training_loss,
)
from .model import FewShotDetector, ModelConfig

logger = logging.getLogger(__name__)

PHASES = ("base", "finetune")
MODES = ("ours", "frcn_few", "frcn_joint", "frcn_ft")
SINGLE_PHASE_MODES = ("frcn_few", "frcn_joint")
LOSS_CSV_HEADER = "iteration,rpn_cls,rpn_reg,roi_cls,roi_reg,total"

# leaner proposal budget during training; ground-truth boxes are appended
# so the second stage always sees positives
TRAIN_PRE_NMS_TOP = 300
TRAIN_POST_NMS_TOP = 24


def train_anchor_config(base: AnchorConfig) -> AnchorConfig:
    """The model's anchor grid with the training-time proposal budget."""
    return replace(base, pre_nms_top=TRAIN_PRE_NMS_TOP,
                   post_nms_top=TRAIN_POST_NMS_TOP)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training phase.

    ``k`` is required for fine-tuning and for the single-phase k-shot
    baselines. Rates and counts must be non-negative; zero is allowed so
    a frozen optimizer (learning_rate=0) and a no-op run (iterations=0)
    stay expressible.
    """

    phase: str = "base"
    mode: str = "ours"
    k: Optional[int] = None
    learning_rate: float = 1e-3
    iterations: int = 200
    batch_episodes: int = 1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    sample_batch: int = 64

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in SINGLE_PHASE_MODES and self.phase == "finetune":
            raise ConfigError(f"mode {self.mode!r} is single-phase; phase=finetune is invalid")
        needs_k = self.phase == "finetune" or self.mode in SINGLE_PHASE_MODES
        if needs_k and self.k is None:
            raise ConfigError(f"k is required for phase={self.phase!r}, mode={self.mode!r}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        for name in ("learning_rate", "momentum", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_episodes < 1:
            raise ConfigError(f"batch_episodes must be >= 1, got {self.batch_episodes}")
        if self.sample_batch < 1:
            raise ConfigError(f"sample_batch must be >= 1, got {self.sample_batch}")

    def to_dict(self) -> dict:
        return {
            "phase": self.phase, "mode": self.mode, "k": self.k,
            "learning_rate": self.learning_rate, "iterations": self.iterations,
            "batch_episodes": self.batch_episodes, "seed": self.seed,
            "momentum": self.momentum, "weight_decay": self.weight_decay,
            "grad_clip": self.grad_clip, "sample_batch": self.sample_batch,
        }


@dataclass
class TrainingData:
    """Query images plus supports, with optional per-image box masking.

    ``classes`` are the supervised class ids. ``kept`` maps image id to
    the annotation indices that stay visible; images absent from the map
    keep everything. Boxes of unsupervised classes are expected to have
    been dropped from the images already.
    """

    images: list[AnnotatedImage]
    classes: list[int]
    support_pool: list[SupportCrop]
    kept: Optional[dict[str, set[int]]] = None

    def __post_init__(self):
        self.images = sorted(self.images, key=lambda im: im.image_id)
        self.classes = sorted(int(c) for c in self.classes)

    def visible_indices(self, image: AnnotatedImage) -> np.ndarray:
        n = image.boxes.shape[0]
        if self.kept is None or image.image_id not in self.kept:
            return np.arange(n)
        keep = self.kept[image.image_id]
        return np.asarray(sorted(i for i in range(n) if i in keep), dtype=np.int64)

    def unmasked_box_count(self, class_id: Optional[int] = None) -> int:
        total = 0
        for image in self.images:
            vis = self.visible_indices(image)
            labels = image.labels[vis]
            total += int(labels.size if class_id is None else (labels == class_id).sum())
        return total


@dataclass
class TrainingResult:
    model: FewShotDetector
    history: list[LossReport]
    checkpoint: Path
    loss_csv: Path


# --------------------------------------------------------------------- #
# data builders


def _filter_image_classes(image: AnnotatedImage, keep: set[int]) -> AnnotatedImage:
    mask = np.asarray([int(l) in keep for l in image.labels], dtype=bool)
    return AnnotatedImage(
        image_id=image.image_id,
        pixels=image.pixels,
        boxes=image.boxes[mask],
        labels=image.labels[mask],
    )


def base_training_data(images: Sequence[AnnotatedImage], split: ClassSplit) -> TrainingData:
    """Abundant phase-one data: novel-class boxes removed outright, so
    novel objects act as unannotated background."""
    base = set(split.base_classes)
    filtered = [_filter_image_classes(im, base) for im in images]
    filtered = [im for im in filtered if im.boxes.shape[0] > 0]
    pool = build_support_pool(filtered, class_ids=base)
    return TrainingData(images=filtered, classes=sorted(base), support_pool=pool)


def kshot_training_data(kshot: KShotSet) -> TrainingData:
    """Balanced data from a k-shot sample; supports come only from the
    kept annotations."""
    kept = {im.image_id: kshot.kept_indices(im.image_id) for im in kshot.images}
    pool = build_support_pool(kshot.images, class_ids=kshot.classes, kept=kept)
    return TrainingData(
        images=list(kshot.images), classes=list(kshot.classes),
        support_pool=pool, kept=kept,
    )


def finetune_training_data(
    images: Sequence[AnnotatedImage], split: ClassSplit, k: int, seed: int
) -> TrainingData:
    """Phase-two data: exactly k boxes per class over base and novel."""
    classes = sorted(split.base_classes | split.novel_classes)
    return kshot_training_data(sample_kshot(images, classes, k, seed))


def joint_training_data(
    images: Sequence[AnnotatedImage], split: ClassSplit, k: int, seed: int
) -> TrainingData:
    """Abundant base boxes plus a k-shot sample of the novel classes."""
    novel = sorted(split.novel_classes)
    kshot = sample_kshot(images, novel, k, seed)
    novel_kept: dict[str, set[int]] = {}
    for pairs in kshot.kept.values():
        for iid, idx in pairs:
            novel_kept.setdefault(iid, set()).add(idx)
    kept: dict[str, set[int]] = {}
    used: list[AnnotatedImage] = []
    base = set(split.base_classes)
    for image in images:
        visible = {
            i for i, label in enumerate(image.labels)
            if int(label) in base or i in novel_kept.get(image.image_id, set())
        }
        if visible:
            kept[image.image_id] = visible
            used.append(image)
    pool = build_support_pool(used, kept=kept)
    return TrainingData(
        images=used, classes=sorted(base | set(novel)), support_pool=pool, kept=kept
    )


# --------------------------------------------------------------------- #
# loss plumbing


def _ground_truth_for_pass(
    data: TrainingData, image: AnnotatedImage, target_class: Optional[int]
) -> GroundTruth:
    """Supervision for one detection pass on one image.

    ``target_class=None`` means a multi-class pass: every visible box is
    a positive with its label. Otherwise boxes of the target class are
    positives, other visible classes are proposal-stage-ignored (they
    remain classifier negatives), and masked boxes are ignored outright.
    """
    vis = data.visible_indices(image)
    vis_set = set(int(i) for i in vis)
    masked = [i for i in range(image.boxes.shape[0]) if i not in vis_set]
    ignore = image.boxes[masked] if masked else None

    if target_class is None:
        return GroundTruth(
            boxes=image.boxes[vis], labels=image.labels[vis], ignore_boxes=ignore
        )
    labels = image.labels[vis]
    pos = vis[labels == target_class]
    other = vis[labels != target_class]
    return GroundTruth(
        boxes=image.boxes[pos],
        labels=image.labels[pos],
        ignore_boxes=ignore,
        rpn_only_ignore_boxes=image.boxes[other] if other.size else None,
    )


def _pass_loss(
    model: FewShotDetector,
    feats: FeatureMap,
    gt: GroundTruth,
    sampler: BalancedSampler,
    rng: np.random.Generator,
    multiclass: bool,
) -> tuple[torch.Tensor, LossReport]:
    """Forward both stages on one feature map and score them."""
    vals = feats.values
    rpn_logits, rpn_deltas = model.rpn(vals.unsqueeze(0))
    fh, fw = vals.shape[1:]
    anchors = generate_anchors(model.config.anchors(), fh, fw, feats.stride)
    valid = np.flatnonzero(valid_anchor_mask(anchors, feats.image_size))
    vt = torch.as_tensor(valid)
    rpn_out = StageOutputs(
        logits=rpn_logits[0][vt], deltas=rpn_deltas[0][vt], boxes=anchors[valid]
    )

    with torch.no_grad():
        proposals = model.rpn.proposals_from_outputs(
            rpn_logits[0].detach(), rpn_deltas[0].detach(), feats,
            train_anchor_config(model.config.anchors()),
        )
    rows = [p.box for p in proposals] + [b for b in gt.boxes]
    roi_boxes = as_box_array(rows) if rows else np.zeros((0, 4))
    rois = torch.zeros((roi_boxes.shape[0], 5), dtype=torch.float32)
    if roi_boxes.shape[0]:
        rois[:, 1:] = torch.from_numpy(roi_boxes.astype(np.float32))
    roi_logits, roi_deltas = model.roi_head(vals.unsqueeze(0), rois, feats.stride)
    if not multiclass:
        roi_logits = roi_logits[:, 0]
    roi_out = StageOutputs(logits=roi_logits, deltas=roi_deltas, boxes=roi_boxes)

    return training_loss(
        ModelOutputs(rpn=rpn_out, roi=roi_out), gt,
        sampler=sampler, rng=rng, multiclass_roi=multiclass,
    )


def _episode_losses(
    model: FewShotDetector,
    data: TrainingData,
    sampler: BalancedSampler,
    rng: np.random.Generator,
) -> list[tuple[torch.Tensor, LossReport]]:
    """Losses for one sampled episode (one or more passes)."""
    query = data.images[int(rng.integers(len(data.images)))]
    if model.config.num_classes > 1:
        # plain multi-class pass on general features; no supports involved
        feats = model.query_features(query.pixels)
        gt = _ground_truth_for_pass(data, query, None)
        return [_pass_loss(model, feats, gt, sampler, rng, multiclass=True)]

    episode = build_episode(
        query, data.support_pool, data.classes, seed=int(rng.integers(2**31))
    )
    maps = model.class_feature_maps(episode)
    out = []
    for class_id in sorted(maps):
        gt = _ground_truth_for_pass(data, query, class_id)
        out.append(_pass_loss(model, maps[class_id], gt, sampler, rng, multiclass=False))
    return out


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    n = len(reports)
    c1 = sum(r.rpn_cls for r in reports) / n
    c2 = sum(r.rpn_reg for r in reports) / n
    c3 = sum(r.roi_cls for r in reports) / n
    c4 = sum(r.roi_reg for r in reports) / n
    return LossReport(
        rpn_cls=c1, rpn_reg=c2, roi_cls=c3, roi_reg=c4, total=c1 + c2 + c3 + c4,
        rpn_pos=sum(r.rpn_pos for r in reports), rpn_neg=sum(r.rpn_neg for r in reports),
        roi_pos=sum(r.roi_pos for r in reports), roi_neg=sum(r.roi_neg for r in reports),
    )


# --------------------------------------------------------------------- #
# the loop


def run_training(
    model: FewShotDetector,
    data: TrainingData,
    config: TrainConfig,
    out_dir: str | Path,
    checkpoint_name: str = "model.npz",
    loss_csv_name: str = "loss.csv",
) -> TrainingResult:
    """Optimize ``model`` on ``data`` and persist checkpoint + loss curve.

    Deterministic for a fixed config: episode sampling, subsampling, and
    single-threaded math all derive from ``config.seed``. A non-finite
    loss aborts with a diagnostic checkpoint.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not data.images:
        raise ConfigError("training data holds no images")

    rng = np.random.default_rng(config.seed)
    sampler = BalancedSampler(batch_size=config.sample_batch, positive_fraction=0.5)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.learning_rate,
        momentum=config.momentum, weight_decay=config.weight_decay,
    )

    history: list[LossReport] = []
    csv_path = out_dir / loss_csv_name
    ckpt_path = out_dir / checkpoint_name
    model.train()
    with open(csv_path, "w") as csv:
        csv.write(LOSS_CSV_HEADER + "\n")
        for iteration in range(config.iterations):
            losses: list[torch.Tensor] = []
            reports: list[LossReport] = []
            for _ in range(config.batch_episodes):
                for loss, report in _episode_losses(model, data, sampler, rng):
                    losses.append(loss)
                    reports.append(report)
            total = torch.stack(losses).mean()
            report = _mean_report(reports)
            history.append(report)
            csv.write(
                f"{iteration},{report.rpn_cls!r},{report.rpn_reg!r},"
                f"{report.roi_cls!r},{report.roi_reg!r},{report.total!r}\n"
            )

            if not math.isfinite(report.total):
                diag = out_dir / "diverged.npz"
                model.save(diag, extra={"train_config": config.to_dict(),
                                        "failed_iteration": iteration})
                raise TrainingDiverged(
                    f"non-finite loss {report.total} at iteration {iteration}",
                    checkpoint=diag,
                )

            optimizer.zero_grad()
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            if iteration % 50 == 0:
                logger.info("iter %d: total loss %.4f", iteration, report.total)

    model.eval()
    model.save(ckpt_path, extra={"train_config": config.to_dict()})
    return TrainingResult(model=model, history=history, checkpoint=ckpt_path, loss_csv=csv_path)


def train_base(
    model: FewShotDetector,
    base_data: TrainingData,
    config: TrainConfig,
    out_dir: str | Path,
    checkpoint_name: str = "base.npz",
) -> TrainingResult:
    """Phase one: abundant base-class episodes."""
    if config.phase != "base":
        raise ConfigError(f"train_base requires phase='base', got {config.phase!r}")
    return run_training(model, base_data, config, out_dir,
                        checkpoint_name=checkpoint_name, loss_csv_name="loss_base.csv")


def finetune_novel(
    model: FewShotDetector,
    kshot: KShotSet,
    config: TrainConfig,
    out_dir: str | Path,
    checkpoint_name: str = "finetuned.npz",
) -> TrainingResult:
    """Phase two: k-shot balanced episodes over base and novel classes.

    All parameters stay trainable; the loop is the same as phase one.
    """
    if config.phase != "finetune":
        raise ConfigError(f"finetune_novel requires phase='finetune', got {config.phase!r}")
    for c in kshot.classes:
        have = kshot.unmasked_count(c)
        if have != config.k:
            raise SamplingError(
                f"k-shot set violates the balance invariant: class {c} keeps "
                f"{have} boxes, expected k={config.k}"
            )
    data = kshot_training_data(kshot)
    return run_training(model, data, config, out_dir,
                        checkpoint_name=checkpoint_name, loss_csv_name="loss_finetune.csv")


def run_baseline(
    mode: str,
    data: TrainingData | tuple[TrainingData, TrainingData],
    config: TrainConfig,
    out_dir: str | Path,
    num_classes: int,
    base_config: Optional[TrainConfig] = None,
    model_config: Optional[ModelConfig] = None,
    init_seed: int = 0,
) -> list[TrainingResult]:
    """Train one of the plain-detector baselines.

    The highlight stage is disabled and the RoI head scores
    ``num_classes`` classes one-vs-rest. ``frcn_ft`` expects
    ``data = (base_data, finetune_data)`` and produces two checkpoints;
    the single-phase modes expect one TrainingData.
    """
    if mode not in SINGLE_PHASE_MODES + ("frcn_ft",):
        raise ConfigError(f"unknown baseline mode {mode!r}")
    if config.mode != mode:
        raise ConfigError(f"config.mode {config.mode!r} does not match {mode!r}")
    base_cfg = model_config or ModelConfig()
    cfg = replace(base_cfg, use_highlight=False, num_classes=num_classes)
    model = FewShotDetector(cfg, init_seed=init_seed)

    if mode == "frcn_ft":
        if not isinstance(data, tuple) or len(data) != 2:
            raise ConfigError("frcn_ft needs (base_data, finetune_data)")
        if config.phase != "finetune":
            raise ConfigError("frcn_ft takes the fine-tune config; set phase='finetune'")
        phase1 = base_config or replace(config, phase="base")
        first = run_training(model, data[0], phase1, out_dir,
                             checkpoint_name=f"{mode}_base.npz",
                             loss_csv_name=f"loss_{mode}_base.csv")
        second = run_training(model, data[1], config, out_dir,
                              checkpoint_name=f"{mode}_finetuned.npz",
                              loss_csv_name=f"loss_{mode}_finetune.csv")
        return [first, second]

    if isinstance(data, tuple):
        raise ConfigError(f"mode {mode!r} takes a single TrainingData")
    result = run_training(model, data, config, out_dir,
                          checkpoint_name=f"{mode}.npz",
                          loss_csv_name=f"loss_{mode}.csv")
    return [result]
