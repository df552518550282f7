"""Detection dataset ingestion.

Parses Pascal-VOC style datasets (an ``images/`` directory of JPEG/PNG
files plus an ``annotations/`` directory of XML files), builds base/novel
class splits and train/test partitions, and extracts resized support crops
from annotations.

Box semantics are half-open pixel coordinates: a box ``(x1, y1, x2, y2)``
covers pixels ``[x1, x2) x [y1, y2)``, so ``0 <= x1 < x2 <= W``.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import AnnotationError, ConfigError, DatasetError, ShapeError, VocabularyError

logger = logging.getLogger(__name__)

CROP_SIZE = 224
MIN_BOX_SIDE = 2  # crops need >= 2 px per side for corner-aligned resizing


@dataclass(frozen=True)
class ClassVocabulary:
    """Class names in id order; ids are assigned alphabetically over names."""

    names: tuple[str, ...]

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "ClassVocabulary":
        return cls(tuple(sorted(set(names))))

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown class name {name!r}; vocabulary is {list(self.names)}")

    def name_of(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.names):
            raise VocabularyError(f"class id {class_id} outside vocabulary of size {len(self.names)}")
        return self.names[class_id]

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(range(len(self.names)))

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class AnnotatedImage:
    """An image plus its ground-truth boxes and class labels."""

    image_id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (N, 4) float64, (x1, y1, x2, y2)
    labels: np.ndarray  # (N,) int64, parallel to boxes

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def validate(self, vocabulary: ClassVocabulary | None = None) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"{self.image_id}: pixels must be (H, W, 3)")
        if len(self.boxes) != len(self.labels):
            raise DatasetError(f"{self.image_id}: boxes and labels are not parallel")
        for i, (x1, y1, x2, y2) in enumerate(self.boxes):
            if not (0 <= x1 < x2 <= self.width and 0 <= y1 < y2 <= self.height):
                raise DatasetError(f"{self.image_id}: box {i} {(x1, y1, x2, y2)} violates bounds")
        if vocabulary is not None:
            for lab in self.labels:
                vocabulary.name_of(int(lab))


@dataclass(frozen=True)
class ClassSplit:
    """Partition of the vocabulary into base and novel classes."""

    base_classes: frozenset[int]
    novel_classes: frozenset[int]
    seed: int = 0

    def __post_init__(self):
        if self.base_classes & self.novel_classes:
            raise ConfigError("base and novel classes overlap")


@dataclass
class SupportCrop:
    """A 224x224 object patch cut from an annotated box."""

    class_id: int
    patch: np.ndarray  # (224, 224, 3) uint8
    source: tuple[str, int]  # (image_id, box index)


def _read_manifest_names(dataset_root: Path) -> list[str] | None:
    manifest = dataset_root / "manifest.json"
    if not manifest.is_file():
        return None
    with open(manifest) as fh:
        data = json.load(fh)
    names = data.get("classes")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise DatasetError(f"{manifest}: 'classes' must be a list of names")
    return names


def read_vocabulary(dataset_root: str | Path) -> ClassVocabulary:
    """Vocabulary from manifest.json if present, else from all annotation files."""
    root = Path(dataset_root)
    names = _read_manifest_names(root)
    if names is not None:
        return ClassVocabulary.from_names(names)
    ann_dir = root / "annotations"
    if not ann_dir.is_dir():
        raise DatasetError(f"no annotations directory under {root}")
    found: set[str] = set()
    for xml_path in sorted(ann_dir.glob("*.xml")):
        try:
            tree = ET.parse(xml_path)
        except ET.ParseError as exc:
            raise AnnotationError(f"{xml_path}: malformed XML ({exc})") from exc
        for obj in tree.getroot().iter("object"):
            name = obj.findtext("name")
            if name:
                found.add(name.strip())
    if not found:
        raise DatasetError(f"no object classes found under {ann_dir}")
    return ClassVocabulary.from_names(found)


def _parse_one(xml_path: Path, images_dir: Path, vocabulary: ClassVocabulary) -> AnnotatedImage:
    try:
        tree = ET.parse(xml_path)
    except ET.ParseError as exc:
        raise AnnotationError(f"{xml_path}: malformed XML ({exc})") from exc
    root = tree.getroot()
    filename = root.findtext("filename")
    if not filename:
        raise AnnotationError(f"{xml_path}: missing <filename>")
    image_path = images_dir / filename
    if not image_path.is_file():
        raise DatasetError(f"{xml_path}: image {image_path} not found")
    with Image.open(image_path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    height, width = pixels.shape[:2]

    boxes, labels = [], []
    for i, obj in enumerate(root.iter("object")):
        name = (obj.findtext("name") or "").strip()
        label = vocabulary.id_of(name)
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationError(f"{xml_path}: object {i} has no <bndbox>")
        try:
            coords = [float(bnd.findtext(tag)) for tag in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{xml_path}: object {i} has a non-numeric bndbox") from exc
        x1 = min(max(coords[0], 0.0), width)
        y1 = min(max(coords[1], 0.0), height)
        x2 = min(max(coords[2], 0.0), width)
        y2 = min(max(coords[3], 0.0), height)
        if x2 - x1 < 1 or y2 - y1 < 1:
            logger.warning("%s: object %d degenerate after clamping, dropped", xml_path.name, i)
            continue
        boxes.append((x1, y1, x2, y2))
        labels.append(label)

    image_id = Path(filename).stem
    return AnnotatedImage(
        image_id=image_id,
        pixels=pixels,
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
    )


def parse_annotations(
    dataset_root: str | Path, vocabulary: ClassVocabulary | None = None
) -> list[AnnotatedImage]:
    """Parse every annotation file under ``dataset_root/annotations``.

    Boxes are clamped to image bounds; class names map to integer ids by
    sorted-name order. Per-file failures (missing image, malformed XML,
    unknown class) are collected and reported together in one DatasetError.
    """
    root = Path(dataset_root)
    ann_dir = root / "annotations"
    images_dir = root / "images"
    if not ann_dir.is_dir() or not images_dir.is_dir():
        raise DatasetError(f"{root} must contain images/ and annotations/ directories")
    if vocabulary is None:
        vocabulary = read_vocabulary(root)

    images: list[AnnotatedImage] = []
    failures: list[str] = []
    for xml_path in sorted(ann_dir.glob("*.xml")):
        try:
            images.append(_parse_one(xml_path, images_dir, vocabulary))
        except (AnnotationError, DatasetError, VocabularyError) as exc:
            failures.append(str(exc))
    if failures:
        raise DatasetError(
            f"{len(failures)} annotation file(s) failed to parse:\n" + "\n".join(failures)
        )
    if not images:
        raise DatasetError(f"no annotation files under {ann_dir}")
    return images


def load_dataset(dataset_root: str | Path) -> tuple[ClassVocabulary, list[AnnotatedImage]]:
    """Convenience wrapper returning the vocabulary alongside parsed images."""
    vocabulary = read_vocabulary(dataset_root)
    return vocabulary, parse_annotations(dataset_root, vocabulary)


def make_split(class_ids: Iterable[int], novel_class: int, seed: int = 0) -> ClassSplit:
    """Designate one class as novel and the rest as base."""
    vocab = set(int(c) for c in class_ids)
    if len(vocab) < 2:
        raise ConfigError("vocabulary must contain at least 2 classes to split")
    if novel_class not in vocab:
        raise VocabularyError(f"novel class {novel_class} not in vocabulary {sorted(vocab)}")
    return ClassSplit(
        base_classes=frozenset(vocab - {novel_class}),
        novel_classes=frozenset({novel_class}),
        seed=seed,
    )


def partition_train_test(
    images: Sequence[AnnotatedImage], ratio: float, seed: int
) -> tuple[list[AnnotatedImage], list[AnnotatedImage]]:
    """Split images into train/test with |train| = round(ratio * N).

    Deterministic given (images, ratio, seed): images are ordered by id
    before the seeded shuffle, so input order does not matter. Rounding is
    half-up.
    """
    if not images:
        raise DatasetError("cannot partition an empty image list")
    if not 0 < ratio < 1:
        raise ConfigError(f"ratio must be in (0, 1), got {ratio}")
    ordered = sorted(images, key=lambda im: im.image_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    n_train = int(math.floor(ratio * len(ordered) + 0.5))
    train_idx = set(perm[:n_train].tolist())
    train = [ordered[i] for i in range(len(ordered)) if i in train_idx]
    test = [ordered[i] for i in range(len(ordered)) if i not in train_idx]
    return train, test


def _resize_bilinear(patch: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (h, w, 3) uint8 patch.

    Corner samples map exactly onto source corner pixels, so a 2x2 source
    lands its four values on the four output corners unchanged.
    """
    t = torch.from_numpy(np.ascontiguousarray(patch)).to(torch.float32)
    t = t.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=True)
    out = out.squeeze(0).permute(1, 2, 0).round().clamp(0, 255)
    return out.to(torch.uint8).numpy()


def crop_supports(image: AnnotatedImage) -> list[SupportCrop]:
    """Cut one support crop per annotated box, resized to 224x224.

    Boxes narrower or shorter than 2 px carry no usable appearance signal
    and are skipped with a warning record.
    """
    crops: list[SupportCrop] = []
    for i, (box, label) in enumerate(zip(image.boxes, image.labels)):
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        if x2 - x1 < MIN_BOX_SIDE or y2 - y1 < MIN_BOX_SIDE:
            logger.warning(
                "%s: box %d is %dx%d px, too small for a support crop; skipped",
                image.image_id, i, x2 - x1, y2 - y1,
            )
            continue
        patch = image.pixels[y1:y2, x1:x2]
        crops.append(
            SupportCrop(
                class_id=int(label),
                patch=_resize_bilinear(patch, CROP_SIZE),
                source=(image.image_id, i),
            )
        )
    return crops


def build_support_pool(
    images: Sequence[AnnotatedImage],
    class_ids: Iterable[int] | None = None,
    kept: dict[str, set[int]] | None = None,
) -> list[SupportCrop]:
    """Crop supports across images, optionally restricted to given classes
    and to per-image kept box indices (k-shot masking)."""
    wanted = None if class_ids is None else {int(c) for c in class_ids}
    pool: list[SupportCrop] = []
    for image in images:
        keep = kept.get(image.image_id, set()) if kept is not None else None
        for crop in crop_supports(image):
            _, box_idx = crop.source
            if keep is not None and box_idx not in keep:
                continue
            if wanted is not None and crop.class_id not in wanted:
                continue
            pool.append(crop)
    return pool


def write_split_manifest(
    path: str | Path,
    vocabulary: ClassVocabulary,
    split: ClassSplit,
    train_images: Sequence[AnnotatedImage],
    test_images: Sequence[AnnotatedImage],
    support_pool: Sequence[SupportCrop],
) -> None:
    """Persist a split as JSON: class names, train/test ids, crop provenance."""
    crops: dict[str, list[list]] = {name: [] for name in vocabulary.names}
    for crop in support_pool:
        crops[vocabulary.name_of(crop.class_id)].append([crop.source[0], crop.source[1]])
    doc = {
        "base_classes": sorted(vocabulary.name_of(c) for c in split.base_classes),
        "novel_classes": sorted(vocabulary.name_of(c) for c in split.novel_classes),
        "seed": split.seed,
        "train_image_ids": [im.image_id for im in train_images],
        "test_image_ids": [im.image_id for im in test_images],
        "support_crops": crops,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_split_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"split manifest {path} not found")
    with open(path) as fh:
        return json.load(fh)
