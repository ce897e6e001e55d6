"""Caption decoder: masked self-attention, gated multimodal cross
attention, and beam-search generation.

Word embeddings plus positions feed a causally masked self-attention;
the normalized result queries each visual stream through its own
cross-attention head set.  Sigmoid gates weight the word features and
each attended stream before summation:

    g_word = sigmoid(x_word W_word + b)
    g_m    = sigmoid([x'_m ; x_word] W_m + b)
    x_fused = g_word * x_word + sum_m g_m * x'_m

The layer output is Norm(Norm(x_fused) + FFN(Norm(x_fused))) with the
inner normalization computed once and reused — implemented literally.
A bias-free linear and softmax produce the word distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .attention import FeedForward, MultiHeadCrossAttention, causal_mask
from .encoder import PositionalEmbedding


@dataclass(frozen=True)
class CaptionHypothesis:
    """A (possibly finished) decode: token ids starting with the start id."""

    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    @property
    def generated(self) -> tuple[int, ...]:
        return self.tokens[1:]


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, streams: tuple[str, ...]):
        super().__init__()
        if not streams:
            raise ValueError("decoder needs at least one visual stream")
        self.streams = tuple(streams)
        self.self_attention = MultiHeadCrossAttention(d_model, n_heads)
        self.norm_word = nn.LayerNorm(d_model)
        self.cross = nn.ModuleDict(
            {m: MultiHeadCrossAttention(d_model, n_heads) for m in self.streams}
        )
        # Fusion gates carry bias terms (unlike the attention projections).
        self.gate_word = nn.Linear(d_model, d_model, bias=True)
        self.gates = nn.ModuleDict(
            {m: nn.Linear(2 * d_model, d_model, bias=True) for m in self.streams}
        )
        self.norm_inner = nn.LayerNorm(d_model)
        self.norm_outer = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model)

    def forward(
        self,
        x: Tensor,
        streams: dict[str, Tensor],
        record: dict | None = None,
    ) -> Tensor:
        t = x.shape[-2]
        mask = causal_mask(t, dtype=x.dtype, device=x.device)
        if record is not None:
            attended, weights = self.self_attention(x, x, mask=mask, return_weights=True)
            record["self"] = weights
        else:
            attended = self.self_attention(x, x, mask=mask)
        x_word = self.norm_word(attended + x)

        fused = torch.sigmoid(self.gate_word(x_word)) * x_word
        for m in self.streams:
            if record is not None:
                x_m, weights = self.cross[m](x_word, streams[m], return_weights=True)
                record[m] = weights
            else:
                x_m = self.cross[m](x_word, streams[m])
            gate = torch.sigmoid(self.gates[m](torch.cat([x_m, x_word], dim=-1)))
            fused = fused + gate * x_m

        inner = self.norm_inner(fused)
        return self.norm_outer(inner + self.ffn(inner))


class CaptionDecoder(nn.Module):
    """Stack of decoder layers plus embedding table and output head.

    ``d_model`` is the visual stream width (2D).  Sequences are token
    ids beginning with the start id; the position table holds
    ``t_max + 1`` rows (start token plus up to ``t_max`` generated).
    """

    def __init__(
        self,
        vocab_size: int,
        d_model: int,
        n_heads: int,
        t_max: int = 30,
        n_layers: int = 1,
        streams: tuple[str, ...] = ("rgb", "sem"),
        pos_kind: str = "sinusoidal",
        start_id: int = 0,
        end_id: int = 1,
    ):
        super().__init__()
        if t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {t_max}")
        if n_layers < 1:
            raise ValueError(f"need at least one decoder layer, got {n_layers}")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.t_max = t_max
        self.streams = tuple(streams)
        self.start_id = start_id
        self.end_id = end_id
        self.embedding = nn.Embedding(vocab_size, d_model)
        self.position = PositionalEmbedding(t_max + 1, d_model, pos_kind)
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads, self.streams) for _ in range(n_layers)
        )
        self.out_proj = nn.Linear(d_model, vocab_size, bias=False)

    def _check_streams(self, streams: dict[str, Tensor]) -> None:
        if set(streams) != set(self.streams):
            raise ValueError(
                f"decoder expects streams {sorted(self.streams)}, got {sorted(streams)}"
            )

    def forward(
        self,
        token_ids: Tensor,
        streams: dict[str, Tensor],
        record: list | None = None,
    ) -> Tensor:
        """Teacher-forced logits [.., T, vocab] for id sequences [.., T].

        With ``record`` (a list), each layer appends its attention maps
        ({"self": .., stream: ..}).
        """
        self._check_streams(streams)
        if token_ids.dim() not in (1, 2):
            raise ValueError(f"token ids must be [T] or [B, T], got {tuple(token_ids.shape)}")
        t = token_ids.shape[-1]
        if t > self.t_max + 1:
            raise ValueError(f"sequence length {t} exceeds t_max + 1 = {self.t_max + 1}")
        if token_ids.numel() and (
            token_ids.min() < 0 or token_ids.max() >= self.vocab_size
        ):
            raise ValueError("token id out of vocabulary range")
        x = self.embedding(token_ids) + self.position(t).to(self.embedding.weight.dtype)
        for layer in self.layers:
            layer_record: dict | None = {} if record is not None else None
            x = layer(x, streams, record=layer_record)
            if record is not None:
                record.append(layer_record)
        return self.out_proj(x)

    @torch.no_grad()
    def generate(
        self,
        streams: dict[str, Tensor],
        beam_size: int = 4,
        t_max: int | None = None,
        length_penalty: float = 0.0,
    ) -> CaptionHypothesis:
        """Beam search over full token sequences.

        Constant-width semantics: at each step every live hypothesis is
        expanded with every token; end-token candidates ranked within the
        overall top ``beam_size`` are banked as finished, and the live
        set refills to the top ``beam_size`` non-end candidates.  At
        ``t_max`` generated tokens, live hypotheses count as finished.
        The answer maximizes (length-adjusted) logprob; ties prefer the
        lexicographically smaller token sequence.  With ``beam_size=1``
        this is greedy decoding: appended logprobs are never positive,
        so extending a hypothesis never raises its score.
        """
        if beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {beam_size}")
        t_max = self.t_max if t_max is None else t_max
        if t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {t_max}")
        if t_max > self.t_max:
            raise ValueError(
                f"t_max {t_max} exceeds the decoder's position table ({self.t_max})"
            )
        self._check_streams(streams)
        for name, grid in streams.items():
            if grid.dim() != 2:
                raise ValueError(
                    f"generation takes unbatched [N, D] streams; {name} has shape "
                    f"{tuple(grid.shape)}"
                )

        was_training = self.training
        self.eval()
        try:
            live = [CaptionHypothesis((self.start_id,), 0.0, False)]
            finished: list[CaptionHypothesis] = []
            for _ in range(t_max):
                prefix = torch.tensor(
                    [h.tokens for h in live],
                    dtype=torch.long,
                    device=self.embedding.weight.device,
                )
                batched = {
                    m: g.unsqueeze(0).expand(len(live), -1, -1)
                    for m, g in streams.items()
                }
                logits = self.forward(prefix, batched)
                logprobs = torch.log_softmax(logits[:, -1, :], dim=-1)
                candidates: list[tuple[float, tuple[int, ...]]] = []
                for i, hyp in enumerate(live):
                    row = logprobs[i].tolist()
                    candidates.extend(
                        (hyp.logprob + lp, hyp.tokens + (v,))
                        for v, lp in enumerate(row)
                    )
                candidates.sort(key=lambda c: (-c[0], c[1]))
                for lp, tokens in candidates[:beam_size]:
                    if tokens[-1] == self.end_id:
                        finished.append(CaptionHypothesis(tokens, lp, True))
                live = [
                    CaptionHypothesis(tokens, lp, False)
                    for lp, tokens in (
                        c for c in candidates if c[1][-1] != self.end_id
                    )
                ][:beam_size]
                if not live:
                    break
            finished.extend(
                CaptionHypothesis(h.tokens, h.logprob, True) for h in live
            )

            def score(h: CaptionHypothesis) -> float:
                if length_penalty > 0.0:
                    return h.logprob / (len(h.generated) ** length_penalty)
                return h.logprob

            return min(finished, key=lambda h: (-score(h), h.tokens))
        finally:
            if was_training:
                self.train()
