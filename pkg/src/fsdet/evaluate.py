"""Average-precision scoring and the benchmark grid around it.

AP follows the VOC convention: greedy matching of score-sorted
detections against at-most-once-matchable ground truth at a fixed IoU
threshold, then the area under the precision-recall curve with
all-points interpolation (the precision envelope), not the older
11-point variant. Classes with zero ground-truth boxes get no AP at all
rather than 0, so absent classes cannot drag averages down.

The grid runner evaluates one cell per (mode, split, k), keeps going
when a cell's checkpoint is missing, and persists results.csv,
summary.json, and per-split grouped-bar plots.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import boxes as boxlib
from .episodes import Episode
from .errors import DatasetError, MissingArtifactError
from .ingest import AnnotatedImage, SupportCrop
from .model import FewShotDetector

logger = logging.getLogger(__name__)

EVAL_IOU = 0.5
AP_VARIANT = "voc_all_points_interpolation"

# one scored box: (image_id, [x1, y1, x2, y2], score)
ScoredBox = tuple[str, np.ndarray, float]


def compute_ap(
    detections: Sequence[ScoredBox],
    ground_truth: Mapping[str, np.ndarray],
    iou_thresh: float = EVAL_IOU,
) -> Optional[float]:
    """Average precision for one class over a set of images.

    ``detections`` are (image_id, box, score) triples; ``ground_truth``
    maps image id to an (N, 4) box array. Returns None when there is no
    ground truth anywhere (AP undefined), 0.0 when ground truth exists
    but nothing was detected.

    Matching is greedy in score order with ties broken by image id then
    box coordinates, so the result is permutation invariant. Each
    ground-truth box matches at most one detection.
    """
    gt = {iid: boxlib.as_box_array(b) for iid, b in ground_truth.items()}
    n_gt = sum(b.shape[0] for b in gt.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0

    def order_key(d: ScoredBox):
        iid, box, score = d
        b = np.asarray(box, dtype=np.float64)
        return (-score, iid, b[0], b[1], b[2], b[3])

    ordered = sorted(detections, key=order_key)
    matched: dict[str, np.ndarray] = {
        iid: np.zeros(b.shape[0], dtype=bool) for iid, b in gt.items()
    }
    tp = np.zeros(len(ordered))
    fp = np.zeros(len(ordered))
    for i, (iid, box, _) in enumerate(ordered):
        boxes = gt.get(iid)
        if boxes is None or boxes.shape[0] == 0:
            fp[i] = 1
            continue
        overlaps = boxlib.iou_matrix(np.asarray(box, dtype=np.float64)[None, :], boxes)[0]
        best = int(np.argmax(overlaps))  # ties go to the lowest index
        if overlaps[best] >= iou_thresh and not matched[iid][best]:
            matched[iid][best] = True
            tp[i] = 1
        else:
            fp[i] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    # precision envelope over recall, integrated at recall change points
    r = np.concatenate(([0.0], recall, [1.0]))
    p = np.concatenate(([0.0], precision, [0.0]))
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.flatnonzero(r[1:] != r[:-1])
    ap = float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))
    return ap


@dataclass(frozen=True)
class EvalResult:
    """Per-class APs for one (mode, split, k) cell."""

    per_class_ap: dict[int, Optional[float]]
    novel_ap: Optional[float]
    split_id: int
    k: int
    mode: str

    def __post_init__(self):
        for c, ap in self.per_class_ap.items():
            if ap is not None and not 0.0 <= ap <= 1.0:
                raise ValueError(f"AP for class {c} out of range: {ap}")


@dataclass
class EvalData:
    """What an evaluation pass needs besides the model."""

    images: list[AnnotatedImage]
    support_pool: list[SupportCrop]
    task_classes: list[int]
    novel_classes: frozenset[int]


def select_eval_supports(
    support_pool: Sequence[SupportCrop],
    task_classes: Sequence[int],
    seed: int,
) -> dict[int, SupportCrop]:
    """One fixed support crop per class for a whole evaluation run."""
    by_class: dict[int, list[SupportCrop]] = {}
    for crop in support_pool:
        by_class.setdefault(crop.class_id, []).append(crop)
    rng = np.random.default_rng(seed)
    out: dict[int, SupportCrop] = {}
    for c in sorted(int(c) for c in task_classes):
        candidates = sorted(by_class.get(c, []), key=lambda cr: cr.source)
        if not candidates:
            raise DatasetError(f"no support crop available for class {c}")
        out[c] = candidates[int(rng.integers(len(candidates)))]
    return out


def evaluate_detector(
    model: FewShotDetector,
    data: EvalData,
    seed: int = 0,
    iou_thresh: float = EVAL_IOU,
    score_thresh: float = 0.05,
) -> dict[int, Optional[float]]:
    """Per-class AP of a model over an image set.

    Support crops are selected once (seeded) and reused for every image,
    so two runs with the same seed score identical detections.
    """
    supports = select_eval_supports(data.support_pool, data.task_classes, seed)
    task = sorted(int(c) for c in data.task_classes)
    per_class_dets: dict[int, list[ScoredBox]] = {c: [] for c in task}
    per_class_gt: dict[int, dict[str, np.ndarray]] = {c: {} for c in task}

    for image in sorted(data.images, key=lambda im: im.image_id):
        for c in task:
            per_class_gt[c][image.image_id] = image.boxes[image.labels == c]
        episode = Episode(query=image, supports=dict(supports), task_classes=list(task))
        for det in model.detect(episode, score_thresh=score_thresh):
            if det.class_id in per_class_dets:
                per_class_dets[det.class_id].append(
                    (image.image_id, det.box, det.score)
                )

    return {
        c: compute_ap(per_class_dets[c], per_class_gt[c], iou_thresh) for c in task
    }


def make_result(
    per_class_ap: dict[int, Optional[float]],
    novel_classes: frozenset[int],
    split_id: int,
    k: int,
    mode: str,
) -> EvalResult:
    novel = [per_class_ap[c] for c in sorted(novel_classes) if c in per_class_ap]
    defined = [ap for ap in novel if ap is not None]
    novel_ap = float(np.mean(defined)) if defined else None
    return EvalResult(
        per_class_ap=dict(per_class_ap), novel_ap=novel_ap,
        split_id=split_id, k=k, mode=mode,
    )


@dataclass
class BenchmarkGrid:
    """All cell results of a benchmark sweep plus any failures."""

    results: list[EvalResult] = field(default_factory=list)
    failed: list[dict] = field(default_factory=list)

    def novel_table(self) -> dict[tuple[str, int, int], Optional[float]]:
        return {(r.mode, r.split_id, r.k): r.novel_ap for r in self.results}

    def lookup(self, mode: str, split_id: int, k: int) -> Optional[EvalResult]:
        for r in self.results:
            if (r.mode, r.split_id, r.k) == (mode, split_id, k):
                return r
        return None


def run_benchmark(
    model_factory: Callable[[str, int, int], FewShotDetector],
    splits: Sequence[int],
    ks: Sequence[int],
    modes: Sequence[str],
    data_for_split: Callable[[int], EvalData],
    out_dir: Optional[str | Path] = None,
    seed: int = 0,
    iou_thresh: float = EVAL_IOU,
) -> BenchmarkGrid:
    """Evaluate every (mode, split, k) cell; missing checkpoints do not
    stop the sweep, they mark the cell failed."""
    grid = BenchmarkGrid()
    for mode in modes:
        for split_id in splits:
            data = data_for_split(split_id)
            for k in ks:
                try:
                    model = model_factory(mode, split_id, k)
                except (MissingArtifactError, FileNotFoundError) as exc:
                    logger.warning("cell (%s, split %d, k=%d) failed: %s",
                                   mode, split_id, k, exc)
                    grid.failed.append(
                        {"mode": mode, "split": split_id, "k": k, "reason": str(exc)}
                    )
                    continue
                aps = evaluate_detector(model, data, seed=seed, iou_thresh=iou_thresh)
                grid.results.append(
                    make_result(aps, data.novel_classes, split_id, k, mode)
                )
    if out_dir is not None:
        write_grid(grid, out_dir, iou_thresh=iou_thresh)
    return grid


def write_grid(grid: BenchmarkGrid, out_dir: str | Path, iou_thresh: float = EVAL_IOU) -> dict:
    """Persist results.csv (one row per class per cell) and summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    with open(csv_path, "w") as fh:
        fh.write("mode,split,k,class,ap\n")
        for r in sorted(grid.results, key=lambda r: (r.mode, r.split_id, r.k)):
            for c in sorted(r.per_class_ap):
                ap = r.per_class_ap[c]
                fh.write(f"{r.mode},{r.split_id},{r.k},{c},"
                         f"{'' if ap is None else repr(ap)}\n")

    summary: dict = {
        "ap_variant": AP_VARIANT,
        "iou_thresh": iou_thresh,
        "novel_ap": {},
        "failed_cells": grid.failed,
    }
    for r in grid.results:
        summary["novel_ap"].setdefault(r.mode, {}).setdefault(
            str(r.split_id), {}
        )[str(r.k)] = r.novel_ap
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def read_results_csv(path: str | Path) -> list[dict]:
    """Rows of a results.csv back as dicts (ap None where blank)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = dict(zip(header, parts))
            row["split"] = int(row["split"])
            row["k"] = int(row["k"])
            row["class"] = int(row["class"])
            row["ap"] = None if row["ap"] == "" else float(row["ap"])
            rows.append(row)
    return rows


def plot_results(grid: BenchmarkGrid, out_dir: str | Path) -> list[Path]:
    """One grouped-bar chart per split (x = k, bars = modes) plus the
    plotted values as CSV. Empty grid: warn and write nothing."""
    if not grid.results:
        logger.warning("empty benchmark grid; nothing to plot")
        return []
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = sorted({r.split_id for r in grid.results})
    modes = sorted({r.mode for r in grid.results})
    table = grid.novel_table()
    written: list[Path] = []

    csv_path = out_dir / "plot_data.csv"
    with open(csv_path, "w") as fh:
        fh.write("split,mode,k,novel_ap\n")
        for split_id in splits:
            ks = sorted({r.k for r in grid.results if r.split_id == split_id})
            for mode in modes:
                for k in ks:
                    ap = table.get((mode, split_id, k))
                    fh.write(f"{split_id},{mode},{k},"
                             f"{'' if ap is None else repr(ap)}\n")
    written.append(csv_path)

    for split_id in splits:
        ks = sorted({r.k for r in grid.results if r.split_id == split_id})
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / max(len(modes), 1)
        xs = np.arange(len(ks), dtype=np.float64)
        for m, mode in enumerate(modes):
            heights = [
                table.get((mode, split_id, k)) or 0.0 for k in ks
            ]
            ax.bar(xs + (m - (len(modes) - 1) / 2) * width, heights,
                   width=width, label=mode)
        ax.set_xticks(xs)
        ax.set_xticklabels([str(k) for k in ks])
        ax.set_xlabel("k (annotated boxes per class)")
        ax.set_ylabel("novel-class AP")
        ax.set_ylim(0, 1)
        ax.set_title(f"split {split_id}")
        ax.legend()
        fig.tight_layout()
        png = out_dir / f"split_{split_id}.png"
        fig.savefig(png)
        plt.close(fig)
        written.append(png)
    return written
