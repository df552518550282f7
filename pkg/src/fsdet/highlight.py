"""Serial coarse/fine channel highlighters and depth-wise cross correlation.

Support embeddings are turned into per-class feature-exciting factors: the
coarse highlighter squeezes an embedding through three fully-connected
layers into a sigmoid-bounded channel vector, the fine highlighter refines
that vector with a single fully-connected layer. Each factor acts as a set
of 1x1 depth-wise correlation kernels that rescale the query feature map
channel by channel, specializing general features to one class. The
correlation op itself is general (any kh x kw kernel, valid mode); the
pipeline uses the 1x1 case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeatureMap, SupportEmbedding
from .errors import ShapeError, UsageError

COARSE = "coarse"
FINE = "fine"


@dataclass
class ExcitingFactor:
    """Per-class channel vector used as depth-wise correlation kernels."""

    values: torch.Tensor  # (C,)
    class_id: int
    stage: str  # "coarse" | "fine"


class CoarseHighlighter(nn.Module):
    """Three fully-connected layers ending in a sigmoid.

    Maps a length-D support embedding down to the feature-map channel
    count; the sigmoid bounds every entry to (0, 1).
    """

    def __init__(self, embed_dim: int, hidden1: int, hidden2: int, out_channels: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, hidden1)
        self.fc2 = nn.Linear(hidden1, hidden2)
        self.fc3 = nn.Linear(hidden2, out_channels)

    def forward(self, embedding: SupportEmbedding) -> ExcitingFactor:
        vec = embedding.values
        if vec.ndim != 1 or vec.shape[0] != self.fc1.in_features:
            raise ShapeError(
                f"embedding length {tuple(vec.shape)} does not match "
                f"expected ({self.fc1.in_features},)"
            )
        x = F.relu(self.fc1(vec))
        x = F.relu(self.fc2(x))
        x = torch.sigmoid(self.fc3(x))
        return ExcitingFactor(values=x, class_id=embedding.class_id, stage=COARSE)


class FineHighlighter(nn.Module):
    """Single fully-connected refinement of a coarse factor.

    Keeps a sigmoid by default so the second-stage factor is also a bounded
    reweighting; set activation="identity" for an unbounded variant.
    """

    def __init__(self, channels: int, activation: str = "sigmoid"):
        super().__init__()
        if activation not in ("sigmoid", "identity"):
            raise UsageError(f"unknown fine activation {activation!r}")
        self.fc = nn.Linear(channels, channels)
        self.activation = activation

    def forward(self, factor: ExcitingFactor) -> ExcitingFactor:
        if factor.stage != COARSE:
            raise UsageError(f"fine highlighter expects a coarse factor, got stage {factor.stage!r}")
        vec = factor.values
        if vec.ndim != 1 or vec.shape[0] != self.fc.in_features:
            raise ShapeError(
                f"factor length {tuple(vec.shape)} does not match expected ({self.fc.in_features},)"
            )
        x = self.fc(vec)
        if self.activation == "sigmoid":
            x = torch.sigmoid(x)
        return ExcitingFactor(values=x, class_id=factor.class_id, stage=FINE)


def dw_cross_correlate(features: FeatureMap, kernels: torch.Tensor) -> FeatureMap:
    """Valid-mode 2-D cross correlation, channel by channel.

    ``kernels`` is (C, kh, kw) with C equal to the feature channel count;
    output spatial size is (H - kh + 1, W - kw + 1). With 1x1 kernels this
    reduces to per-channel scalar multiplication and preserves spatial size.
    """
    vals = features.values
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (C, kh, kw), got shape {tuple(kernels.shape)}")
    c, h, w = vals.shape
    kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"kernel channels {kc} != feature channels {c}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than feature map {h}x{w}")
    out = F.conv2d(vals.unsqueeze(0), kernels.unsqueeze(1), groups=c).squeeze(0)
    return FeatureMap(values=out, stride=features.stride, image_size=features.image_size)


class HighlightModule(nn.Module):
    """Coarse and fine highlighters applied serially via 1x1 correlation."""

    def __init__(
        self,
        embed_dim: int,
        feature_channels: int,
        hidden1: int = 256,
        hidden2: int = 192,
        fine_activation: str = "sigmoid",
        fine_input: str = "coarse_factor",
    ):
        super().__init__()
        if fine_input not in ("coarse_factor", "embedding"):
            raise UsageError(f"unknown fine_input {fine_input!r}")
        if fine_input == "embedding" and embed_dim != feature_channels:
            raise ShapeError(
                "fine_input='embedding' requires the embedding length to equal "
                f"the feature channel count ({embed_dim} != {feature_channels})"
            )
        self.coarse = CoarseHighlighter(embed_dim, hidden1, hidden2, feature_channels)
        self.fine = FineHighlighter(feature_channels, activation=fine_activation)
        self.fine_input = fine_input

    def factors(self, embedding: SupportEmbedding) -> tuple[ExcitingFactor, ExcitingFactor]:
        coarse = self.coarse(embedding)
        if self.fine_input == "embedding":
            # alternative wiring: feed the raw embedding, tagged as first-stage
            fine_src = ExcitingFactor(embedding.values, embedding.class_id, COARSE)
        else:
            fine_src = coarse
        return coarse, self.fine(fine_src)


def apply_highlight(
    features: FeatureMap,
    support_embeddings: Sequence[SupportEmbedding],
    module: HighlightModule,
) -> dict[int, FeatureMap]:
    """Specialize a query feature map for every supported class.

    For each embedding the coarse then fine factors are applied serially as
    1x1 depth-wise correlation kernels, preserving spatial dimensions.
    """
    class_ids = [e.class_id for e in support_embeddings]
    if len(set(class_ids)) != len(class_ids):
        raise UsageError(f"duplicate class embeddings: {class_ids}")
    out: dict[int, FeatureMap] = {}
    for emb in support_embeddings:
        coarse, fine = module.factors(emb)
        stage1 = dw_cross_correlate(features, coarse.values.reshape(-1, 1, 1))
        stage2 = dw_cross_correlate(stage1, fine.values.reshape(-1, 1, 1))
        out[emb.class_id] = stage2
    return out
