"""The full change captioner: siamese encoders, feature enhancement,
and the gated multimodal decoder, wired per configuration.

Dual-modality models consume four images (RGB before/after plus
semantic map before/after); single-modality configurations consume one
pair end to end.  All ablation toggles live on :class:`ModelConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import SEM_CLASS_ORDER, SEM_PALETTE
from .decoder import CaptionDecoder, CaptionHypothesis
from .encoder import (
    BackboneConfig,
    PositionalEmbedding,
    SiameseEncoder,
    image_to_tensor,
)
from .enhance import FeatureEnhancer

MODALITY_ROLES = {
    "rgb": ("rgb_before", "rgb_after"),
    "sem": ("sem_before", "sem_after"),
}


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation toggles."""

    vocab_size: int
    feature_dim: int = 512
    heads: int = 8
    dropout: float = 0.1
    image_size: int = 256
    t_max: int = 30
    backbone_widths: tuple[int, ...] = (32, 64, 128)
    backbone_out: int = 128
    backbone_strides: tuple[int, ...] = (4, 2, 2, 2)
    pos_kind: str = "sinusoidal"
    share_position: bool = True
    sem_input: str = "palette"
    modalities: tuple[str, ...] = ("rgb", "sem")
    use_cmca: bool = True
    use_udca: bool = True
    use_xrgb: bool = True
    use_xsem: bool = True
    decoder_layers: int = 1

    def __post_init__(self) -> None:
        self.backbone_widths = tuple(self.backbone_widths)
        self.backbone_strides = tuple(self.backbone_strides)
        self.modalities = tuple(self.modalities)
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 specials plus content")
        if self.feature_dim % self.heads != 0:
            raise ValueError(
                f"feature_dim {self.feature_dim} not divisible by heads {self.heads}"
            )
        unknown = set(self.modalities) - set(MODALITY_ROLES)
        if unknown or not self.modalities:
            raise ValueError(f"modalities must be a non-empty subset of (rgb, sem)")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError("duplicate modalities")
        if self.use_cmca and len(self.modalities) < 2:
            raise ValueError(
                "cross-modal attention requires both modalities; disable use_cmca "
                "for single-modality models"
            )
        if self.sem_input not in ("palette", "onehot"):
            raise ValueError(f"unknown sem_input mode {self.sem_input!r}")
        if self.use_xrgb and "rgb" not in self.modalities:
            raise ValueError("use_xrgb requires the rgb modality")
        if self.use_xsem and "sem" not in self.modalities:
            raise ValueError("use_xsem requires the sem modality")
        if not self.decoder_streams:
            raise ValueError("at least one decoder stream (use_xrgb/use_xsem) is required")
        stride = 1
        for s in self.backbone_strides:
            stride *= s
        if self.image_size % stride != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by total stride {stride}"
            )
        if self.image_size // stride < 1:
            raise ValueError("backbone stride collapses the grid to nothing")

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.backbone_strides:
            out *= s
        return out

    @property
    def grid_side(self) -> int:
        return self.image_size // self.total_stride

    @property
    def n_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def decoder_streams(self) -> tuple[str, ...]:
        out = []
        if self.use_xrgb and "rgb" in self.modalities:
            out.append("rgb")
        if self.use_xsem and "sem" in self.modalities:
            out.append("sem")
        return tuple(out)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        d["backbone_strides"] = list(self.backbone_strides)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        for key in ("backbone_widths", "backbone_strides", "modalities"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def palette_to_onehot(img: np.ndarray) -> np.ndarray:
    """Map a semantic RGB image to one-hot class channels.

    Each pixel snaps to the nearest canonical palette color (unlabeled
    black plus the six classes); output is float32 [n_classes, H, W].
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 semantic image, got shape {img.shape}")
    palette = np.array(
        [SEM_PALETTE[c] for c in SEM_CLASS_ORDER], dtype=np.int32
    )  # [K, 3]
    flat = img.reshape(-1, 3).astype(np.int32)
    dists = ((flat[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    idx = dists.argmin(axis=1).reshape(img.shape[:2])
    onehot = np.zeros((len(palette),) + img.shape[:2], dtype=np.float32)
    for k in range(len(palette)):
        onehot[k][idx == k] = 1.0
    return onehot


class ChangeCaptioner(nn.Module):
    """End-to-end model: images in, caption token distributions out."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.feature_dim
        n = config.n_tokens

        shared = (
            PositionalEmbedding(n, d, config.pos_kind)
            if config.share_position
            else None
        )
        encoders = {}
        for m in config.modalities:
            pos = shared if shared is not None else PositionalEmbedding(n, d, config.pos_kind)
            in_ch = 3
            if m == "sem" and config.sem_input == "onehot":
                in_ch = len(SEM_CLASS_ORDER)
            backbone = BackboneConfig(
                widths=config.backbone_widths,
                out_channels=config.backbone_out,
                strides=config.backbone_strides,
                in_channels=in_ch,
            )
            encoders[m] = SiameseEncoder(backbone, d, pos)
        self.encoders = nn.ModuleDict(encoders)
        self.enhancer = FeatureEnhancer(
            d,
            config.heads,
            config.dropout,
            modalities=config.modalities,
            use_cmca=config.use_cmca,
            use_udca=config.use_udca,
        )
        self.decoder = CaptionDecoder(
            vocab_size=config.vocab_size,
            d_model=2 * d,
            n_heads=config.heads,
            t_max=config.t_max,
            n_layers=config.decoder_layers,
            streams=config.decoder_streams,
            pos_kind=config.pos_kind,
        )

    # -- image plumbing ----------------------------------------------------

    def prepare_images(
        self, arrays: dict[str, np.ndarray], dtype: torch.dtype | None = None
    ) -> dict[str, Tensor]:
        """uint8 role->array mapping to role->tensor per the config.

        Dual-modality models require all four roles; single-modality
        models only their own pair.  Semantic maps become one-hot
        channel stacks in ``onehot`` mode.
        """
        dtype = dtype or next(self.parameters()).dtype
        out: dict[str, Tensor] = {}
        for m in self.config.modalities:
            for role in MODALITY_ROLES[m]:
                if role not in arrays:
                    raise ValueError(
                        f"this model consumes modalities {self.config.modalities} "
                        f"and needs the {role!r} image"
                    )
                img = arrays[role]
                if img.shape[0] != self.config.image_size or img.shape[1] != self.config.image_size:
                    raise ValueError(
                        f"{role}: expected {self.config.image_size}x"
                        f"{self.config.image_size} images, got {img.shape[:2]}"
                    )
                if m == "sem" and self.config.sem_input == "onehot":
                    out[role] = torch.from_numpy(palette_to_onehot(img)).to(dtype)
                else:
                    out[role] = image_to_tensor(img, dtype)
        return out

    def _modality_pairs(
        self, images: dict[str, Tensor]
    ) -> dict[str, tuple[Tensor, Tensor]]:
        pairs = {}
        for m in self.config.modalities:
            before_role, after_role = MODALITY_ROLES[m]
            if before_role not in images or after_role not in images:
                raise ValueError(
                    f"model with modalities {self.config.modalities} requires "
                    f"{before_role!r} and {after_role!r} images"
                )
            pairs[m] = (images[before_role], images[after_role])
        return pairs

    # -- core ---------------------------------------------------------------

    def encode_pair(self, before: Tensor, after: Tensor, modality: str):
        """Run one modality's siamese encoder on an image pair."""
        if modality not in self.encoders:
            raise ValueError(f"model has no {modality!r} encoder")
        return self.encoders[modality](before, after)

    def encode(self, images: dict[str, Tensor], record: bool = False):
        """Images -> decoder streams {modality: [.., N, 2D]}."""
        pairs = self._modality_pairs(images)
        grids = {
            m: self.encoders[m](before, after) for m, (before, after) in pairs.items()
        }
        if record:
            fused, maps = self.enhancer(grids, record=True)
        else:
            fused = self.enhancer(grids)
            maps = None
        streams = {m: fused[m] for m in self.config.decoder_streams}
        if record:
            return streams, maps
        return streams

    def forward(
        self,
        images: dict[str, Tensor],
        token_ids: Tensor,
        record: bool = False,
    ):
        """Teacher-forced logits; with ``record`` also all attention maps."""
        if record:
            streams, enc_maps = self.encode(images, record=True)
            dec_record: list = []
            logits = self.decoder(token_ids, streams, record=dec_record)
            return logits, {"encoder": enc_maps, "decoder": dec_record}
        streams = self.encode(images)
        return self.decoder(token_ids, streams)

    @torch.no_grad()
    def generate(
        self,
        images: dict[str, Tensor],
        beam_size: int = 4,
        t_max: int | None = None,
        length_penalty: float = 0.0,
        record: bool = False,
    ):
        """Beam-search a caption for one (unbatched) scene.

        With ``record=True`` returns ``(hypothesis, maps)`` where maps
        holds the encoder attention maps and, for the winning sequence,
        per-layer decoder maps from a teacher-forced replay.
        """
        was_training = self.training
        self.eval()
        try:
            if record:
                streams, enc_maps = self.encode(images, record=True)
            else:
                streams = self.encode(images)
            hyp = self.decoder.generate(
                streams,
                beam_size=beam_size,
                t_max=t_max,
                length_penalty=length_penalty,
            )
            if not record:
                return hyp
            dec_record: list = []
            ids = torch.tensor(hyp.tokens, dtype=torch.long)
            self.decoder(ids, streams, record=dec_record)
            return hyp, {"encoder": enc_maps, "decoder": dec_record}
        finally:
            if was_training:
                self.train()
