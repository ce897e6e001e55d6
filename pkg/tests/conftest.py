import os

os.environ.setdefault("MMODALCC_THREADS", "1")

import pytest
import torch

torch.set_num_threads(1)

from mmodalcc.model import ModelConfig
from mmodalcc.synthetic import make_corpus, make_overfit_corpus


def tiny_model_config(**overrides) -> ModelConfig:
    """A desk-scale config: 32x32 images, G=2 grid, D=16."""
    base = dict(
        vocab_size=24,
        feature_dim=16,
        heads=2,
        dropout=0.1,
        image_size=32,
        t_max=12,
        backbone_widths=(8,),
        backbone_out=8,
        backbone_strides=(4, 4),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    entries = make_corpus(root, n_entries=40, image_size=32, seed=0)
    return root, entries


@pytest.fixture(scope="session")
def overfit_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    entries = make_overfit_corpus(root, image_size=32, seed=7)
    return root, entries
