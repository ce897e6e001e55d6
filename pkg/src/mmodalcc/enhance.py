"""Two-stage feature enhancement between the encoders and the decoder.

Each stage owns exactly ONE cross-attention parameter set that serves
two roles back to back: first cross-modal attention (each modality's
grid attends to the other modality at the same timestamp), then
difference-guided attention (each grid attends to its modality's
after-minus-before difference).  Stage 2 repeats the recipe on stage 1's
output with freshly computed differences.  Per modality, the two stage
outputs are fused by a shared convolutional block with a residual:

    x = CB([t0_1; t1_1]);  x = CB([t0_2; t1_2] + x)

yielding one [N, 2D] grid per modality for the decoder.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .attention import CrossAttentionBlock

N_STAGES = 2

FeaturePair = tuple[Tensor, Tensor]


class ConvolutionalBlock(nn.Module):
    """1x1 -> BN -> ReLU -> 3x3 -> BN -> ReLU -> 1x1 -> BN on the grid.

    Operates on flattened [.., N, C] features; N must be a perfect
    square so the grid can be restored for the 3x3 convolution.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)
        self.conv3 = nn.Conv2d(channels, channels, kernel_size=1)
        self.bn3 = nn.BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, n, c = x.shape
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"token count {n} is not a square grid")
        y = x.transpose(1, 2).reshape(b, c, g, g)
        y = torch.relu(self.bn1(self.conv1(y)))
        y = torch.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        y = y.flatten(2).transpose(1, 2)
        return y.squeeze(0) if squeeze else y


class FeatureEnhancer(nn.Module):
    """Cross-modal + difference-guided attention stages with conv fusion.

    ``forward`` takes ``{modality: (grid_t0, grid_t1)}`` and returns
    ``{modality: fused [.., N, 2D]}``.  With ``record=True`` it also
    returns the attention maps of every cross-attention call, keyed
    ``stage{1,2}.{cmca,udca}.{modality}_t{0,1}``.
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        dropout: float = 0.1,
        modalities: tuple[str, ...] = ("rgb", "sem"),
        use_cmca: bool = True,
        use_udca: bool = True,
    ):
        super().__init__()
        if not modalities:
            raise ValueError("at least one modality is required")
        if len(set(modalities)) != len(modalities):
            raise ValueError(f"duplicate modalities: {modalities}")
        if use_cmca and len(modalities) < 2:
            raise ValueError("cross-modal attention needs two modalities")
        self.modalities = tuple(modalities)
        self.use_cmca = use_cmca
        self.use_udca = use_udca
        # One shared parameter set per stage for both attention roles.
        self.stages = nn.ModuleList(
            CrossAttentionBlock(d_model, n_heads, dropout) for _ in range(N_STAGES)
        )
        self.fusion = nn.ModuleDict(
            {m: ConvolutionalBlock(2 * d_model) for m in self.modalities}
        )

    def _attend(self, block, source, target, maps, key):
        if maps is None:
            return block(source, target)
        out, weights = block(source, target, return_weights=True)
        maps[key] = weights
        return out

    def cmca(
        self,
        stage_index: int,
        features: dict[str, FeaturePair],
        maps: dict | None = None,
    ) -> dict[str, FeaturePair]:
        """Cross-modal pass: each grid attends to the other modality at
        the same timestamp, through this stage's shared block."""
        block = self.stages[stage_index]
        m_a, m_b = self.modalities
        out: dict[str, FeaturePair] = {}
        for src_m, tgt_m in ((m_a, m_b), (m_b, m_a)):
            pair = []
            for t in range(2):
                key = f"stage{stage_index + 1}.cmca.{src_m}_t{t}"
                pair.append(
                    self._attend(block, features[src_m][t], features[tgt_m][t], maps, key)
                )
            out[src_m] = (pair[0], pair[1])
        return out

    def udca(
        self,
        stage_index: int,
        features: dict[str, FeaturePair],
        differences: dict[str, Tensor],
        maps: dict | None = None,
    ) -> dict[str, FeaturePair]:
        """Difference-guided pass: each grid attends to its own
        modality's (after - before) difference, through the SAME block
        as this stage's cross-modal pass."""
        block = self.stages[stage_index]
        out: dict[str, FeaturePair] = {}
        for m in self.modalities:
            pair = []
            for t in range(2):
                key = f"stage{stage_index + 1}.udca.{m}_t{t}"
                pair.append(
                    self._attend(block, features[m][t], differences[m], maps, key)
                )
            out[m] = (pair[0], pair[1])
        return out

    def forward(
        self,
        features: dict[str, FeaturePair],
        record: bool = False,
    ):
        if set(features) != set(self.modalities):
            raise ValueError(
                f"expected features for {sorted(self.modalities)}, "
                f"got {sorted(features)}"
            )
        for m, (t0, t1) in features.items():
            if t0.shape != t1.shape:
                raise ValueError(
                    f"{m}: timestamp grids must share one shape, got "
                    f"{tuple(t0.shape)} vs {tuple(t1.shape)}"
                )
        maps: dict[str, Tensor] | None = {} if record else None

        current = features
        stage_outputs: list[dict[str, FeaturePair]] = []
        for s in range(N_STAGES):
            enhanced = (
                self.cmca(s, current, maps)
                if self.use_cmca and len(self.modalities) == 2
                else current
            )
            differences = {m: pair[1] - pair[0] for m, pair in current.items()}
            refined = (
                self.udca(s, enhanced, differences, maps)
                if self.use_udca
                else enhanced
            )
            stage_outputs.append(refined)
            current = refined

        fused: dict[str, Tensor] = {}
        for m in self.modalities:
            cb = self.fusion[m]
            first = torch.cat(stage_outputs[0][m], dim=-1)
            second = torch.cat(stage_outputs[1][m], dim=-1)
            x = cb(first)
            x = cb(second + x)
            fused[m] = x
        if record:
            return fused, maps
        return fused
