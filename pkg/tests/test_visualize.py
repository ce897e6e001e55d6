"""Attention export: array files, grids, overlays, naming."""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from mmodalcc.visualize import (
    STOPWORDS,
    export_attention,
    load_array,
    render_overlay,
    save_array,
    to_grid,
    upsample_bilinear,
)

H, N, T = 2, 4, 3  # heads, grid tokens, generated tokens


def test_save_load_array_round_trip(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    p = save_array(tmp_path, "some_map", arr, {"module": "x", "token_index": 2})
    assert p.name == "some_map.bin"
    sidecar = json.loads((tmp_path / "some_map.json").read_text())
    assert sidecar["shape"] == [3, 4]
    assert sidecar["dtype"] == "<f4"
    assert sidecar["module"] == "x"
    assert sidecar["token_index"] == 2
    again = load_array(tmp_path, "some_map")
    assert np.array_equal(again, arr)
    # the payload really is little-endian float32, 4 bytes per value
    assert (tmp_path / "some_map.bin").stat().st_size == 12 * 4


def test_to_grid_is_row_major():
    grid = to_grid(np.array([1.0, 2.0, 3.0, 4.0]))
    assert grid.shape == (2, 2)
    assert grid[0, 0] == 1.0 and grid[0, 1] == 2.0
    assert grid[1, 0] == 3.0 and grid[1, 1] == 4.0
    stacked = to_grid(np.ones((5, 9)))
    assert stacked.shape == (5, 3, 3)
    with pytest.raises(ValueError, match="square"):
        to_grid(np.ones(5))


def test_upsample_preserves_constant_fields():
    up = upsample_bilinear(np.full((2, 2), 0.25, dtype=np.float32), 16, 16)
    assert up.shape == (16, 16)
    assert np.allclose(up, 0.25)


def test_upsample_is_monotone_along_a_gradient():
    grid = np.array([[0.0, 1.0], [0.0, 1.0]], dtype=np.float32)
    up = upsample_bilinear(grid, 8, 8)
    for row in up:
        assert np.all(np.diff(row) >= -1e-6)
    assert up[0, 0] < up[0, -1]


def test_render_overlay_writes_a_blended_png(tmp_path):
    image = np.full((16, 16, 3), 100, dtype=np.uint8)
    grid = np.array([[0.0, 1.0], [0.5, 0.25]], dtype=np.float32)
    p = render_overlay(image, grid, tmp_path / "o.png", alpha=0.5)
    with Image.open(p) as im:
        out = np.asarray(im)
    assert out.shape == (16, 16, 3)
    assert out.dtype == np.uint8
    assert not np.array_equal(out, image)  # something was painted


def test_render_overlay_alpha_zero_returns_the_image(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    p = render_overlay(image, np.ones((2, 2), dtype=np.float32),
                       tmp_path / "plain.png", alpha=0.0)
    with Image.open(p) as im:
        out = np.asarray(im)
    assert np.array_equal(out, image)


def _fake_maps():
    g = torch.Generator().manual_seed(0)

    def w(q, k):
        raw = torch.rand(H, q, k, generator=g)
        return raw / raw.sum(dim=-1, keepdim=True)

    encoder = {
        f"stage{s}.{role}.{m}_t{t}": w(N, N)
        for s in (1, 2)
        for role in ("cmca", "udca")
        for m in ("rgb", "sem")
        for t in (0, 1)
    }
    decoder = [{"self": w(T + 1, T + 1), "rgb": w(T + 1, N), "sem": w(T + 1, N)}]
    return {"encoder": encoder, "decoder": decoder}


def test_export_attention_writes_encoder_and_decoder_artifacts(tmp_path):
    maps = _fake_maps()
    tokens = ["a", "house", "appears"]  # "a" is a stopword
    after = {m: np.zeros((16, 16, 3), dtype=np.uint8) for m in ("rgb", "sem")}
    written = export_attention(tmp_path, maps, tokens, after_images=after)
    names = {p.name for p in written}

    # raw encoder maps plus two summary grids for each of the 16 keys
    assert "encoder_stage1_cmca_rgb_t0.bin" in names
    assert "encoder_stage2_udca_sem_t1_head_mean.bin" in names
    assert "encoder_stage1_cmca_rgb_t0_head_max.bin" in names
    enc_bins = [n for n in names if n.startswith("encoder_") and n.endswith(".bin")]
    assert len(enc_bins) == 16 * 3

    # one decoder map per token per stream per aggregate
    assert "decoder_rgb_token00_a_head_mean.bin" in names
    assert "decoder_sem_token02_appears_head_max.bin" in names
    # overlays only for content words ("a" is skipped)
    assert "overlay_rgb_token01_house.png" in names
    assert "overlay_rgb_token00_a.png" not in names
    # content-word summaries with overlays
    assert "decoder_rgb_summary_head_mean.bin" in names
    assert "overlay_sem_summary_head_max.png" in names

    raw = load_array(tmp_path, "encoder_stage1_cmca_rgb_t0")
    assert raw.shape == (H, N, N)
    assert np.allclose(raw.sum(axis=-1), 1.0, atol=1e-6)
    grid = load_array(tmp_path, "decoder_rgb_token01_house_head_mean")
    assert grid.shape == (2, 2)

    sidecar = json.loads((tmp_path / "decoder_rgb_token01_house_head_mean.json").read_text())
    assert sidecar["token_index"] == 1
    assert sidecar["modality"] == "rgb"


def test_export_attention_summary_uses_content_words(tmp_path):
    maps = _fake_maps()
    tokens = ["a", "house", "appears"]
    export_attention(tmp_path, maps, tokens, after_images=None, render=False)
    summary = load_array(tmp_path, "decoder_rgb_summary_head_mean")
    g1 = load_array(tmp_path, "decoder_rgb_token01_house_head_mean")
    g2 = load_array(tmp_path, "decoder_rgb_token02_appears_head_mean")
    assert np.allclose(summary, (g1 + g2) / 2, atol=1e-7)


def test_export_attention_all_stopword_fallback(tmp_path):
    maps = _fake_maps()
    tokens = ["the", "a", "is"]
    written = export_attention(tmp_path, maps, tokens, render=False)
    names = {p.name for p in written}
    assert "decoder_rgb_summary_head_mean.bin" in names  # fell back to all tokens
    summary = load_array(tmp_path, "decoder_rgb_summary_head_mean")
    grids = [
        load_array(tmp_path, f"decoder_rgb_token{i:02d}_{t}_head_mean")
        for i, t in enumerate(tokens)
    ]
    assert np.allclose(summary, np.mean(grids, axis=0), atol=1e-7)


def test_export_attention_sanitizes_token_filenames(tmp_path):
    maps = _fake_maps()
    tokens = ["<unk>", "house", "pond"]
    written = export_attention(tmp_path, maps, tokens, render=False)
    names = {p.name for p in written}
    assert "decoder_rgb_token00__unk__head_mean.bin" in names


def test_export_without_decoder_maps_is_encoder_only(tmp_path):
    maps = {"encoder": _fake_maps()["encoder"], "decoder": []}
    written = export_attention(tmp_path, maps, [], render=False)
    assert all(p.name.startswith("encoder_") for p in written)


def test_stopword_list_is_lowercase_closed_class():
    assert "the" in STOPWORDS
    assert "house" not in STOPWORDS
    assert all(w == w.lower() for w in STOPWORDS)
