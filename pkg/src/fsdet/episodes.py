"""Episode assembly and k-shot balanced sampling.

An episode pairs one query image with exactly one support crop per task
class. A k-shot set keeps exactly k annotations per class and masks the
surplus; masked boxes are excluded from the loss and from support pools.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, SamplingError
from .ingest import AnnotatedImage, ClassVocabulary, SupportCrop

__all__ = ["Episode", "KShotSet", "build_episode", "sample_kshot",
           "write_kshot_manifest", "read_kshot_manifest"]


@dataclass
class Episode:
    """One query image plus one support crop per task class."""

    query: AnnotatedImage
    supports: dict[int, SupportCrop]
    task_classes: list[int]
    # classes whose support crop had to come from the query image itself
    self_support_classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        missing = [c for c in self.task_classes if c not in self.supports]
        if missing:
            raise SamplingError(f"episode lacks supports for classes {missing}")


@dataclass
class KShotSet:
    """Images whose annotations are masked down to exactly k per class."""

    images: list[AnnotatedImage]
    k: int
    classes: list[int]
    kept: dict[int, list[tuple[str, int]]]  # class -> [(image_id, box index)]

    def kept_indices(self, image_id: str) -> set[int]:
        out: set[int] = set()
        for pairs in self.kept.values():
            out.update(idx for iid, idx in pairs if iid == image_id)
        return out

    def unmasked_count(self, class_id: int) -> int:
        return len(self.kept.get(class_id, []))


def _pool_by_class(support_pool: Sequence[SupportCrop]) -> dict[int, list[SupportCrop]]:
    by_class: dict[int, list[SupportCrop]] = defaultdict(list)
    for crop in support_pool:
        by_class[crop.class_id].append(crop)
    for crops in by_class.values():
        crops.sort(key=lambda c: c.source)
    return by_class


def build_episode(
    query: AnnotatedImage,
    support_pool: Sequence[SupportCrop],
    task_classes: Sequence[int],
    seed: int,
) -> Episode:
    """Pick one support crop per task class, deterministically given seed.

    Crops sourced from the query image itself are avoided whenever another
    image can supply the class; forced self-supports are recorded on the
    episode.
    """
    task_classes = [int(c) for c in task_classes]
    if len(set(task_classes)) != len(task_classes):
        raise SamplingError(f"duplicate task classes in {task_classes}")
    by_class = _pool_by_class(support_pool)
    rng = np.random.default_rng(seed)
    supports: dict[int, SupportCrop] = {}
    self_supported: list[int] = []
    for c in task_classes:
        candidates = by_class.get(c, [])
        if not candidates:
            raise SamplingError(f"no support crop available for class {c}")
        external = [crop for crop in candidates if crop.source[0] != query.image_id]
        if external:
            chosen = external[int(rng.integers(len(external)))]
        else:
            chosen = candidates[int(rng.integers(len(candidates)))]
            self_supported.append(c)
        supports[c] = chosen
    return Episode(query=query, supports=supports, task_classes=task_classes,
                   self_support_classes=self_supported)


def sample_kshot(
    images: Sequence[AnnotatedImage],
    classes: Sequence[int],
    k: int,
    seed: int,
) -> KShotSet:
    """Keep exactly k annotations per class; mask the rest.

    Deterministic given seed. Raises CapacityError (with per-class
    availability) when some class has fewer than k annotations.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    classes = [int(c) for c in classes]
    available: dict[int, list[tuple[str, int]]] = {c: [] for c in classes}
    for image in images:
        for idx, label in enumerate(image.labels):
            if int(label) in available:
                available[int(label)].append((image.image_id, idx))
    short = {c: len(v) for c, v in available.items() if len(v) < k}
    if short:
        counts = {c: len(v) for c, v in available.items()}
        raise CapacityError(
            f"classes {sorted(short)} have fewer than k={k} annotations "
            f"(available: {counts})",
            available=counts,
        )

    rng = np.random.default_rng(seed)
    kept: dict[int, list[tuple[str, int]]] = {}
    for c in classes:
        candidates = sorted(available[c])
        picked = rng.choice(len(candidates), size=k, replace=False)
        kept[c] = sorted(candidates[int(i)] for i in picked)

    kept_ids = {iid for pairs in kept.values() for iid, _ in pairs}
    kept_images = [im for im in images if im.image_id in kept_ids]
    return KShotSet(images=kept_images, k=k, classes=classes, kept=kept)


def write_kshot_manifest(path: str | Path, kshot: KShotSet, vocabulary: ClassVocabulary) -> None:
    """Persist the kept (image id, box index) pairs per class as JSON."""
    doc = {
        "k": kshot.k,
        "classes": [vocabulary.name_of(c) for c in kshot.classes],
        "kept": {
            vocabulary.name_of(c): [[iid, idx] for iid, idx in pairs]
            for c, pairs in kshot.kept.items()
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_kshot_manifest(
    path: str | Path,
    images: Mapping[str, AnnotatedImage],
    vocabulary: ClassVocabulary,
) -> KShotSet:
    """Rebuild a KShotSet from its manifest and the parsed images."""
    with open(path) as fh:
        doc = json.load(fh)
    kept = {
        vocabulary.id_of(name): [(iid, int(idx)) for iid, idx in pairs]
        for name, pairs in doc["kept"].items()
    }
    kept_ids = {iid for pairs in kept.values() for iid, _ in pairs}
    return KShotSet(
        images=[images[iid] for iid in sorted(kept_ids)],
        k=int(doc["k"]),
        classes=[vocabulary.id_of(name) for name in doc["classes"]],
        kept=kept,
    )
