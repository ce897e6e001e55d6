"""Multi-head cross attention and its residual block.

The same core serves three roles: cross-modal enhancement (queries from
one modality, keys/values from the other), difference-guided enhancement
(keys/values from a feature difference), and the decoder's masked self /
cross attention (an additive mask hook).  Projections carry no bias
terms; weights use the default uniform(-1/sqrt(fan_in)) initialization.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def check_finite(name: str, x: Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains NaN or Inf values")


class MultiHeadCrossAttention(nn.Module):
    """softmax(Q K^T / sqrt(d_k)) V over h heads, concatenated and projected.

    Queries come from ``source``; keys and values from ``target``.  Works
    on [N, D] or [B, N, D] inputs; source and target may have different
    sequence lengths but must share the model dimension.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(
                f"model dim {d_model} must be divisible by head count {n_heads}"
            )
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        # [..., N, D] -> [..., h, N, d_head]
        *lead, n, _ = x.shape
        return x.view(*lead, n, self.n_heads, self.d_head).transpose(-3, -2)

    def forward(
        self,
        source: Tensor,
        target: Tensor,
        mask: Tensor | None = None,
        return_weights: bool = False,
    ):
        """Returns attended features shaped like ``source``; with
        ``return_weights`` also the [..., h, N_src, N_tgt] weights.

        ``mask`` is additive (0 to keep, -inf to block), broadcast over
        the score tensor.
        """
        for name, x in (("source", source), ("target", target)):
            if x.shape[-1] != self.d_model:
                raise ValueError(
                    f"{name} feature dim {x.shape[-1]} does not match model dim "
                    f"{self.d_model}"
                )
            check_finite(name, x)
        q = self._split(self.w_q(source))
        k = self._split(self.w_k(target))
        v = self._split(self.w_v(target))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores + mask
        weights = torch.softmax(scores, dim=-1)
        attended = weights @ v
        # [..., h, N, d_head] -> [..., N, D]
        *lead, _, n, _ = attended.shape
        merged = attended.transpose(-3, -2).reshape(*lead, n, self.d_model)
        out = self.w_o(merged)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Two bias-free linears with a ReLU: D -> 4D -> D."""

    def __init__(self, d_model: int, expansion: int = 4):
        super().__init__()
        self.lin1 = nn.Linear(d_model, expansion * d_model, bias=False)
        self.lin2 = nn.Linear(expansion * d_model, d_model, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(torch.relu(self.lin1(x)))


class CrossAttentionBlock(nn.Module):
    """Post-norm residual block: attention then feed-forward.

    out1 = LN(source + Dropout(MHA(source, target)))
    out2 = LN(out1 + Dropout(FFN(out1)))
    """

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.1):
        super().__init__()
        self.attention = MultiHeadCrossAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        source: Tensor,
        target: Tensor,
        return_weights: bool = False,
    ):
        if return_weights:
            attended, weights = self.attention(source, target, return_weights=True)
        else:
            attended = self.attention(source, target)
        out = self.norm1(source + self.dropout(attended))
        out = self.norm2(out + self.dropout(self.ffn(out)))
        if return_weights:
            return out, weights
        return out


def causal_mask(t: int, dtype: torch.dtype = torch.float32,
                device: torch.device | None = None) -> Tensor:
    """[t, t] additive mask: -inf strictly above the diagonal."""
    mask = torch.zeros(t, t, dtype=dtype, device=device)
    return mask.masked_fill(
        torch.triu(torch.ones(t, t, dtype=torch.bool, device=device), diagonal=1),
        float("-inf"),
    )
