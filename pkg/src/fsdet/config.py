"""Run configuration: a flat YAML key-value file plus command-line overrides.

Schema (all keys top-level scalars; unknown keys are rejected):

  dataset_root        path to images/ + annotations/ (+ manifest.json)
  out_dir             output root; the FSDET_OUT env var wins over this
  seed                integer, required; nothing falls back to implicit RNG
  novel_class         class NAME held out as novel (required for prepare)
  train_ratio         train fraction of the image list (default 0.6)
  k                   annotations per class in the k-shot phase (default 5)
  mode                ours | frcn_few | frcn_joint | frcn_ft (default ours)
  iterations_base     phase-one steps (default 300)
  iterations_finetune phase-two steps (default 150)
  lr_base             phase-one learning rate (default 1e-3)
  lr_finetune         phase-two learning rate (default 1e-4)
  batch_episodes      episodes per optimization step (default 1)
  sample_batch        anchors/proposals scored per stage per step (default 64)
  feature_channels    backbone width (default 64)
  anchor_scales       comma-separated anchor side lengths (default "32,64,128")
  fixture_images      images generated by the fixture command (default 40)
  fixture_size        fixture image side in pixels (default 128)
  fixture_classes     fixture class count (default 4)

Values given as ``--set key=value`` are parsed like YAML scalars and
override the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError

DEFAULTS = {
    "dataset_root": None,
    "out_dir": "out",
    "seed": None,
    "novel_class": None,
    "train_ratio": 0.6,
    "k": 5,
    "mode": "ours",
    "iterations_base": 300,
    "iterations_finetune": 150,
    "lr_base": 1e-3,
    "lr_finetune": 1e-4,
    "batch_episodes": 1,
    "sample_batch": 64,
    "feature_channels": 64,
    "anchor_scales": "32,64,128",
    "fixture_images": 40,
    "fixture_size": 128,
    "fixture_classes": 4,
}

_INT_KEYS = {"seed", "k", "iterations_base", "iterations_finetune",
             "batch_episodes", "sample_batch", "feature_channels",
             "fixture_images", "fixture_size", "fixture_classes"}
_FLOAT_KEYS = {"train_ratio", "lr_base", "lr_finetune"}


@dataclass
class RunConfig:
    dataset_root: Optional[str]
    out_dir: str
    seed: int
    novel_class: Optional[str]
    train_ratio: float
    k: int
    mode: str
    iterations_base: int
    iterations_finetune: int
    lr_base: float
    lr_finetune: float
    batch_episodes: int
    sample_batch: int
    feature_channels: int
    anchor_scales: str
    fixture_images: int
    fixture_size: int
    fixture_classes: int

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def anchor_scale_tuple(self) -> tuple[float, ...]:
        return _parse_scales(self.anchor_scales)

    def require_dataset(self) -> Path:
        if not self.dataset_root:
            raise ConfigError("config key 'dataset_root' is required for this command")
        root = Path(self.dataset_root)
        if not root.is_dir():
            raise ConfigError(f"dataset_root {root} is not a directory")
        return root


def _parse_scales(value: str) -> tuple[float, ...]:
    parts = [p.strip() for p in str(value).split(",") if p.strip()]
    try:
        scales = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"anchor_scales expects comma-separated numbers, got {value!r}")
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError(f"anchor_scales must be positive numbers, got {value!r}")
    return scales


def _coerce(key: str, value):
    if value is None:
        return None
    if key == "anchor_scales" and isinstance(value, (list, tuple)):
        value = ",".join(str(v) for v in value)
    try:
        if key in _INT_KEYS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
    return str(value)


def parse_overrides(pairs: list[str]) -> dict:
    """['k=3', 'mode=ours'] -> {'k': 3, 'mode': 'ours'} (YAML scalar rules)."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        try:
            out[key] = yaml.safe_load(raw)
        except yaml.YAMLError:
            out[key] = raw
    return out


def load_config(path: str | Path, overrides: Optional[dict] = None) -> RunConfig:
    """Merge defaults <- file <- overrides <- FSDET_OUT and validate."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})")
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")

    merged = dict(DEFAULTS)
    for source in (doc, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r} "
                                  f"(known: {', '.join(sorted(DEFAULTS))})")
            merged[key] = _coerce(key, value)

    env_out = os.environ.get("FSDET_OUT")
    if env_out:
        merged["out_dir"] = env_out

    if merged["seed"] is None:
        raise ConfigError("config key 'seed' is required (no implicit randomness)")
    if merged["mode"] not in ("ours", "frcn_few", "frcn_joint", "frcn_ft"):
        raise ConfigError(f"unknown mode {merged['mode']!r}")
    if not 0.0 < merged["train_ratio"] < 1.0:
        raise ConfigError(f"train_ratio must be in (0, 1), got {merged['train_ratio']}")
    _parse_scales(merged["anchor_scales"])  # fail fast on malformed scales
    return RunConfig(**merged)
