"""Deterministic synthetic-shapes detection dataset.

Each class is one shape family in one color (circle, cross, square,
triangle; ids in alphabetical order), drawn without anti-aliasing on a
noisy gray background so every bounding box is the exact pixel extent
of its shape. Output matches the ingest layout: images/ + annotations/
(one XML per image) + manifest.json. The same spec always produces
byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

# class id order is alphabetical, matching vocabulary construction
SHAPES = ("circle", "cross", "square", "triangle")
COLORS = {
    "circle": (220, 60, 50),
    "cross": (235, 200, 40),
    "square": (60, 90, 220),
    "triangle": (50, 180, 80),
}
PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class FixtureSpec:
    n_classes: int = 4
    n_images: int = 40
    image_size: int = 128
    objects_per_image: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(SHAPES):
            raise ConfigError(
                f"n_classes must be within [2, {len(SHAPES)}], got {self.n_classes}"
            )
        if self.n_images < 1:
            raise ConfigError(f"n_images must be >= 1, got {self.n_images}")
        if self.image_size < 64:
            raise ConfigError(f"image_size must be >= 64, got {self.image_size}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(
                f"objects_per_image must satisfy 1 <= lo <= hi, got {lo, hi}"
            )

    @property
    def class_names(self) -> list[str]:
        return list(SHAPES[: self.n_classes])


def _shape_mask(shape: str, size: int, cy: int, cx: int, s: int) -> np.ndarray:
    """Boolean raster of one solid shape; no anti-aliasing anywhere."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= s * s
    if shape == "square":
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    if shape == "cross":
        t = max(1, s // 3)
        vertical = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= s)
        horizontal = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= s)
        return vertical | horizontal
    if shape == "triangle":
        # apex up: half-width grows one pixel every two rows, reaching s at the base
        rel = yy - (cy - s)
        inside_rows = (rel >= 0) & (rel <= 2 * s)
        return inside_rows & (np.abs(xx - cx) <= rel // 2)
    raise ConfigError(f"unknown shape {shape!r}")


def _mask_extent(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open (x1, y1, x2, y2) of the true region."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _boxes_touch(a: tuple, b: tuple, gap: int = 2) -> bool:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    return not (ax2 + gap <= bx1 or bx2 + gap <= ax1 or
                ay2 + gap <= by1 or by2 + gap <= ay1)


def _render_image(
    spec: FixtureSpec, rng: np.random.Generator, class_cycle: list[int]
) -> tuple[np.ndarray, list[tuple], list[int]]:
    """One image: textured background plus non-overlapping solid shapes."""
    size = spec.image_size
    base = int(rng.integers(100, 140))
    noise = rng.integers(-12, 13, size=(size, size, 1))
    pixels = np.clip(base + noise, 0, 255).astype(np.uint8)
    pixels = np.repeat(pixels, 3, axis=2)

    s_min = max(7, size // 16)
    s_max = max(s_min + 1, size // 9)
    margin = s_max + 2
    if margin * 2 + 4 >= size:
        raise ConfigError(f"image_size {size} leaves no room to place objects")

    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    boxes: list[tuple] = []
    labels: list[int] = []
    for obj_idx in range(count):
        placed = False
        for _ in range(PLACEMENT_TRIES):
            s = int(rng.integers(s_min, s_max + 1))
            cy = int(rng.integers(margin, size - margin))
            cx = int(rng.integers(margin, size - margin))
            class_id = class_cycle[0]
            shape = SHAPES[class_id]
            mask = _shape_mask(shape, size, cy, cx, s)
            box = _mask_extent(mask)
            if any(_boxes_touch(box, other) for other in boxes):
                continue
            pixels[mask] = COLORS[shape]
            boxes.append(box)
            labels.append(class_id)
            class_cycle.append(class_cycle.pop(0))  # rotate for balance
            placed = True
            break
        if not placed:
            if obj_idx < lo:
                raise ConfigError(
                    f"image_size {size} too small to place {lo} objects"
                )
            break
    return pixels, boxes, labels


def _write_xml(path: Path, filename: str, size: int, boxes, labels, names) -> None:
    lines = [
        "<annotation>",
        f"  <filename>{filename}</filename>",
        "  <size>",
        f"    <width>{size}</width>",
        f"    <height>{size}</height>",
        "    <depth>3</depth>",
        "  </size>",
    ]
    for box, label in zip(boxes, labels):
        x1, y1, x2, y2 = box
        lines += [
            "  <object>",
            f"    <name>{names[label]}</name>",
            "    <bndbox>",
            f"      <xmin>{x1}</xmin>",
            f"      <ymin>{y1}</ymin>",
            f"      <xmax>{x2}</xmax>",
            f"      <ymax>{y2}</ymax>",
            "    </bndbox>",
            "  </object>",
        ]
    lines.append("</annotation>")
    path.write_text("\n".join(lines) + "\n")


def generate_fixture(spec: FixtureSpec, out_dir: str | Path) -> Path:
    """Write the dataset under ``out_dir`` and return that root path."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    names = spec.class_names
    class_cycle = list(range(spec.n_classes))
    for i in range(spec.n_images):
        pixels, boxes, labels = _render_image(spec, rng, class_cycle)
        filename = f"img_{i:04d}.png"
        Image.fromarray(pixels).save(root / "images" / filename)
        _write_xml(root / "annotations" / f"img_{i:04d}.xml",
                   filename, spec.image_size, boxes, labels, names)

    manifest = {
        "classes": names,
        "n_images": spec.n_images,
        "image_size": spec.image_size,
        "objects_per_image": list(spec.objects_per_image),
        "seed": spec.seed,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root
