"""Siamese grid encoders for the bitemporal image pairs.

Each modality (RGB, semantic map) gets one encoder whose weights are
shared across the two timestamps of that modality and disjoint from the
other modality's encoder.  The backbone is a small plain CNN (no
normalization layers) followed by a 1x1 projection to the feature dim;
the H/32 x W/32 grid is flattened row-major to N = G*G feature vectors
and position embeddings are added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .attention import check_finite


@dataclass
class BackboneConfig:
    """Shape of the convolutional backbone.

    ``widths`` are the intermediate channel counts; ``out_channels`` is
    the final backbone width before the 1x1 projection.  One stride per
    conv stage; their product is the total stride.
    """

    widths: tuple[int, ...] = (32, 64, 128)
    out_channels: int = 128
    strides: tuple[int, ...] = (4, 2, 2, 2)
    in_channels: int = 3

    def __post_init__(self) -> None:
        if len(self.strides) != len(self.widths) + 1:
            raise ValueError(
                f"need {len(self.widths) + 1} strides for {len(self.widths)} "
                f"widths, got {len(self.strides)}"
            )
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive")

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out


class TinyCnnBackbone(nn.Module):
    """Plain stack of strided 3x3 conv + ReLU stages (no normalization)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        channels = (config.in_channels,) + config.widths + (config.out_channels,)
        self.stages = nn.ModuleList(
            nn.Conv2d(channels[i], channels[i + 1], kernel_size=3,
                      stride=config.strides[i], padding=1)
            for i in range(len(channels) - 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.stages:
            x = torch.relu(conv(x))
        return x


def sinusoidal_table(n_positions: int, d_model: int,
                     dtype: torch.dtype = torch.float32) -> Tensor:
    """Interleaved sin/cos position table, [n_positions, d_model]."""
    if d_model % 2 != 0:
        raise ValueError(f"sinusoidal table needs an even dim, got {d_model}")
    position = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, d_model, 2, dtype=torch.float64)
        * (-math.log(10000.0) / d_model)
    )
    table = torch.zeros(n_positions, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table.to(dtype)


class PositionalEmbedding(nn.Module):
    """Additive position embedding: fixed sinusoidal or learned table."""

    def __init__(self, n_positions: int, d_model: int, kind: str = "sinusoidal"):
        super().__init__()
        if kind not in ("sinusoidal", "learned"):
            raise ValueError(f"unknown position embedding kind {kind!r}")
        self.kind = kind
        self.n_positions = n_positions
        if kind == "sinusoidal":
            self.register_buffer("table", sinusoidal_table(n_positions, d_model))
        else:
            self.table = nn.Parameter(torch.zeros(n_positions, d_model))
            nn.init.normal_(self.table, std=0.02)

    def forward(self, n: int) -> Tensor:
        if n > self.n_positions:
            raise ValueError(
                f"requested {n} positions but the table holds {self.n_positions}"
            )
        return self.table[:n]


class SiameseEncoder(nn.Module):
    """One modality's weight-shared encoder for both timestamps.

    ``forward`` maps a [B, C, H, W] (or [C, H, W]) image pair to a pair
    of [B, N, D] (or [N, D]) position-aware feature grids by running the
    same backbone + projection on each image.
    """

    def __init__(
        self,
        backbone_config: BackboneConfig,
        d_model: int,
        position: PositionalEmbedding,
    ):
        super().__init__()
        self.backbone = TinyCnnBackbone(backbone_config)
        self.projection = nn.Conv2d(
            backbone_config.out_channels, d_model, kernel_size=1
        )
        self.position = position
        self.d_model = d_model

    def grid_features(self, image: Tensor, add_position: bool = True) -> Tensor:
        """Encode one image to a flattened [.., N, D] feature grid."""
        check_finite("image", image)
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.dim() != 4:
            raise ValueError(f"expected [B, C, H, W] image, got shape {tuple(image.shape)}")
        fmap = self.projection(self.backbone(image))  # [B, D, G, G]
        b, d, gh, gw = fmap.shape
        flat = fmap.flatten(2).transpose(1, 2)  # row-major [B, N, D]
        if add_position:
            flat = flat + self.position(gh * gw).to(flat.dtype)
        return flat.squeeze(0) if squeeze else flat

    def forward(
        self, before: Tensor, after: Tensor, add_position: bool = True
    ) -> tuple[Tensor, Tensor]:
        if before.shape != after.shape:
            raise ValueError(
                f"image pair must share one shape, got {tuple(before.shape)} "
                f"vs {tuple(after.shape)}"
            )
        return (
            self.grid_features(before, add_position),
            self.grid_features(after, add_position),
        )


def image_to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> Tensor:
    """uint8 HxWx3 array -> [3, H, W] float tensor scaled to [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image array, got shape {img.shape}")
    # float64 intermediate always copies, so read-only inputs are fine
    arr = np.ascontiguousarray(img, dtype=np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype).permute(2, 0, 1)
