"""Checkpoint container: byte determinism and full state round-trips."""

import numpy as np
import pytest
import torch

from mmodalcc.checkpoint import (
    MAGIC,
    build_model,
    load_arrays,
    load_checkpoint,
    restore_optimizer,
    save_arrays,
    save_checkpoint,
)
from mmodalcc.dataset import Vocabulary
from mmodalcc.model import ChangeCaptioner

from conftest import tiny_model_config


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "weights.a": rng.normal(size=(3, 4)).astype(np.float32),
        "weights.b": rng.integers(0, 100, size=(7,)).astype(np.int64),
        "scalar": np.asarray(2.5, dtype=np.float64),
    }


# --- raw container ----------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    arrays = _arrays()
    meta = {"note": "hello", "count": 3}
    p = save_arrays(tmp_path / "x.ckpt", arrays, meta)
    data = load_arrays(p)
    assert data.meta == meta
    assert set(data.arrays) == set(arrays)
    for name in arrays:
        assert data.arrays[name].dtype == arrays[name].dtype
        assert np.array_equal(data.arrays[name], arrays[name])


def test_identical_saves_are_byte_identical(tmp_path):
    arrays = _arrays()
    a = save_arrays(tmp_path / "a.ckpt", arrays, {"k": 1})
    b = save_arrays(tmp_path / "b.ckpt", arrays, {"k": 1})
    assert a.read_bytes() == b.read_bytes()


def test_save_load_save_preserves_bytes(tmp_path):
    a = save_arrays(tmp_path / "a.ckpt", _arrays(), {"k": [1, 2]})
    data = load_arrays(a)
    b = save_arrays(tmp_path / "b.ckpt", data.arrays, data.meta)
    assert a.read_bytes() == b.read_bytes()


def test_file_starts_with_magic(tmp_path):
    p = save_arrays(tmp_path / "x.ckpt", _arrays(), {})
    assert p.read_bytes()[:8] == MAGIC


def test_bad_magic_is_rejected(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_arrays(p)


def test_array_order_in_file_is_sorted_by_name(tmp_path):
    # saving the same dict built in two insertion orders gives one file
    arrays = _arrays()
    reordered = {k: arrays[k] for k in reversed(list(arrays))}
    a = save_arrays(tmp_path / "a.ckpt", arrays, {})
    b = save_arrays(tmp_path / "b.ckpt", reordered, {})
    assert a.read_bytes() == b.read_bytes()


# --- model-level checkpoints ---------------------------------------------------


def _model_and_vocab(seed=0):
    torch.manual_seed(seed)
    vocab = Vocabulary([f"tok{i}" for i in range(20)])
    model = ChangeCaptioner(tiny_model_config(vocab_size=len(vocab)))
    return model, vocab


def test_model_checkpoint_round_trip(tmp_path):
    model, vocab = _model_and_vocab()
    p = save_checkpoint(tmp_path / "m.ckpt", model, vocab, epoch=3, step=17)
    data = load_checkpoint(p)
    assert data.meta["epoch"] == 3
    assert data.meta["step"] == 17
    rebuilt, vocab2 = build_model(data)
    assert vocab2.to_tokens() == vocab.to_tokens()
    sd_a = model.state_dict()
    sd_b = rebuilt.state_dict()
    assert set(sd_a) == set(sd_b)
    for name in sd_a:
        assert torch.equal(sd_a[name], sd_b[name]), name
    assert not rebuilt.training  # checkpoints load ready for inference


def test_rebuilt_model_generates_identically(tmp_path):
    model, vocab = _model_and_vocab(1)
    model.eval()
    p = save_checkpoint(tmp_path / "m.ckpt", model, vocab)
    rebuilt, _ = build_model(load_checkpoint(p))
    g = torch.Generator().manual_seed(5)
    images = {
        role: torch.rand(3, 32, 32, generator=g)
        for role in ("rgb_before", "rgb_after", "sem_before", "sem_after")
    }
    a = model.generate(images, beam_size=2)
    b = rebuilt.generate(images, beam_size=2)
    assert a == b


def test_float64_models_round_trip_with_dtype(tmp_path):
    model, vocab = _model_and_vocab(2)
    model.double()
    p = save_checkpoint(tmp_path / "m64.ckpt", model, vocab)
    rebuilt, _ = build_model(load_checkpoint(p))
    assert next(rebuilt.parameters()).dtype == torch.float64


def test_optimizer_state_round_trip(tmp_path):
    model, vocab = _model_and_vocab(3)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    # take one real step so Adam has moments to save
    images = {
        role: torch.rand(1, 3, 32, 32)
        for role in ("rgb_before", "rgb_after", "sem_before", "sem_after")
    }
    ids = torch.tensor([[0, 5, 6]])
    loss = model(images, ids).sum()
    loss.backward()
    opt.step()
    p = save_checkpoint(tmp_path / "o.ckpt", model, vocab, opt, epoch=1, step=1)

    data = load_checkpoint(p)
    rebuilt, _ = build_model(data)
    opt2 = torch.optim.Adam(rebuilt.parameters(), lr=1e-3)
    restore_optimizer(opt2, data)
    a = opt.state_dict()
    b = opt2.state_dict()
    assert a["param_groups"] == b["param_groups"]
    assert set(a["state"]) == set(b["state"])
    for idx in a["state"]:
        for key in a["state"][idx]:
            va, vb = a["state"][idx][key], b["state"][idx][key]
            if isinstance(va, torch.Tensor):
                assert torch.equal(va, vb), f"{idx}.{key}"
            else:
                assert va == vb, f"{idx}.{key}"


def test_restore_optimizer_without_state_is_an_error(tmp_path):
    model, vocab = _model_and_vocab(4)
    p = save_checkpoint(tmp_path / "m.ckpt", model, vocab)  # no optimizer
    data = load_checkpoint(p)
    opt = torch.optim.Adam(model.parameters())
    with pytest.raises(ValueError, match="no optimizer state"):
        restore_optimizer(opt, data)


def test_model_checkpoint_saves_are_byte_identical(tmp_path):
    model, vocab = _model_and_vocab(5)
    rng_state = torch.get_rng_state()
    a = save_checkpoint(tmp_path / "a.ckpt", model, vocab, epoch=1, step=2)
    torch.set_rng_state(rng_state)
    b = save_checkpoint(tmp_path / "b.ckpt", model, vocab, epoch=1, step=2)
    assert a.read_bytes() == b.read_bytes()
