"""Shared convolutional feature extractor.

One parameter set serves both paths: query images pass through it for
spatial feature maps, support crops pass through the same layers followed
by parameter-free global average pooling for embeddings. The network is a
small residual CNN with four stride-2 stages (total stride 16) and
GroupNorm throughout, so single-image training is stable and inference is
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError
from .ingest import CROP_SIZE, SupportCrop

STRIDE = 16


@dataclass
class FeatureMap:
    """C x H x W activations plus the stride and source image size."""

    values: torch.Tensor  # (C, H, W)
    stride: int
    image_size: tuple[int, int]  # (H, W) of the source image in pixels

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])


@dataclass
class SupportEmbedding:
    """Pooled support-crop descriptor, length D = backbone channel count."""

    values: torch.Tensor  # (D,)
    class_id: int


def normalize_raster(pixels: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) raster -> float32 (1, 3, H, W) tensor in [-1, 1]."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) raster, got {pixels.shape}")
    t = torch.from_numpy(pixels.astype(np.float32, copy=True))
    t = t.permute(2, 0, 1).unsqueeze(0)
    return t / 127.5 - 1.0


class _DownBlock(nn.Module):
    """Stride-2 residual block: two 3x3 convs with a projected skip."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        groups = math.gcd(cout, 8)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.skip = nn.Conv2d(cin, cout, 1, stride=2, bias=False)
        self.skip_norm = nn.GroupNorm(groups, cout)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.relu(y + self.skip_norm(self.skip(x)))


class Backbone(nn.Module):
    """Four-stage stride-16 residual CNN shared by query and support paths."""

    stride = STRIDE

    def __init__(self, channels: int = 128):
        super().__init__()
        if channels < 16 or channels % 4:
            raise ShapeError(f"channels must be a multiple of 4 and >= 16, got {channels}")
        widths = (channels // 4, channels // 2, (3 * channels) // 4, channels)
        self.feature_channels = channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(math.gcd(widths[0], 8), widths[0]),
            nn.ReLU(inplace=True),
        )
        self.stage2 = _DownBlock(widths[0], widths[1])
        self.stage3 = _DownBlock(widths[1], widths[2])
        self.stage4 = _DownBlock(widths[2], widths[3])
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stage4(self.stage3(self.stage2(self.stem(x))))

    def extract_features(self, image: np.ndarray) -> FeatureMap:
        """Feature map for a query raster; H, W = ceil(input / stride)."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
        h, w = image.shape[:2]
        if h < self.stride or w < self.stride:
            raise ShapeError(f"image {h}x{w} is smaller than the stride {self.stride}")
        feats = self.forward(normalize_raster(image))
        return FeatureMap(values=feats[0], stride=self.stride, image_size=(h, w))

    def embed_support(self, crop: SupportCrop) -> SupportEmbedding:
        """Embedding of a 224x224 crop: shared forward pass + global pooling.

        Pooling has no parameters, so the support path adds none beyond the
        shared backbone.
        """
        patch = crop.patch
        if patch.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise ShapeError(f"support crop must be {CROP_SIZE}x{CROP_SIZE}x3, got {patch.shape}")
        feats = self.forward(normalize_raster(patch))
        pooled = feats.mean(dim=(2, 3))[0]
        return SupportEmbedding(values=pooled, class_id=crop.class_id)

    def embed_batch(self, patches: torch.Tensor) -> torch.Tensor:
        """Pooled embeddings for a (B, 3, 224, 224) normalized batch."""
        return self.forward(patches).mean(dim=(2, 3))
