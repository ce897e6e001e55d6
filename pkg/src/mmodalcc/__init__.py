"""Multimodal change captioning for bitemporal remote-sensing scenes.

Siamese grid encoders over RGB and semantic-map pairs, two-stage
cross-modal + difference-guided attention enhancement with shared
per-stage parameters, and a gated multimodal caption decoder with beam
search — plus corpus tooling (augmentation, statistics, linting) and
caption metrics (BLEU, ROUGE-L, simplified METEOR, CIDEr-D, S_m*).
"""

from .attention import CrossAttentionBlock, MultiHeadCrossAttention
from .augment import AugmentSpec, augment_corpus, augment_entry, rewrite_caption
from .dataset import (
    ChangeCategory,
    DatasetEntry,
    LandCover,
    Vocabulary,
    build_vocabulary,
    compute_stats,
    detokenize,
    lint_captions,
    load_index,
    tokenize,
)
from .decoder import CaptionDecoder, CaptionHypothesis
from .encoder import BackboneConfig, PositionalEmbedding, SiameseEncoder
from .enhance import ConvolutionalBlock, FeatureEnhancer
from .metrics import (
    EvalItem,
    MetricReport,
    bleu_n,
    cider_d,
    evaluate,
    meteor_simplified,
    rouge_l,
    s_m_star,
)
from .model import ChangeCaptioner, ModelConfig
from .synthetic import make_corpus, make_overfit_corpus
from .training import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "BackboneConfig",
    "CaptionDecoder",
    "CaptionHypothesis",
    "ChangeCaptioner",
    "ChangeCategory",
    "ConvolutionalBlock",
    "CrossAttentionBlock",
    "DatasetEntry",
    "EvalItem",
    "FeatureEnhancer",
    "LandCover",
    "MetricReport",
    "ModelConfig",
    "MultiHeadCrossAttention",
    "PositionalEmbedding",
    "SiameseEncoder",
    "TrainConfig",
    "TrainState",
    "Vocabulary",
    "augment_corpus",
    "augment_entry",
    "bleu_n",
    "build_vocabulary",
    "cider_d",
    "compute_stats",
    "detokenize",
    "evaluate",
    "lint_captions",
    "load_index",
    "make_corpus",
    "make_overfit_corpus",
    "meteor_simplified",
    "rewrite_caption",
    "rouge_l",
    "s_m_star",
    "tokenize",
    "train",
]
