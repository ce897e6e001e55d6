"""Attention-map export and heatmap overlays.

Raw attention arrays are written as flat float32 little-endian ``.bin``
files, each with a JSON sidecar describing shape, originating module,
token index, and modality.  Grid-level summaries (head-mean and
head-max) are rendered as bilinearly upsampled heatmap overlays on the
after images.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

# Tokens skipped when averaging decoder maps over "content" words.  A
# small closed-class list is enough for caption vocabulary; if a caption
# is all stopwords the summary falls back to every generated token.
STOPWORDS = {
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "at", "on",
    "in", "of", "to", "there", "has", "have", "had", "and", "or", "it",
    "its", "this", "that", "these", "those", "no", "not", "with", "by",
    "from", "into", "over", "some", "same",
}


def save_array(out_dir: str | Path, name: str, array: np.ndarray, meta: dict) -> Path:
    """Write ``name.bin`` (flat float32 LE) plus ``name.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    bin_path = out_dir / f"{name}.bin"
    bin_path.write_bytes(arr.tobytes())
    sidecar = {"name": name, "shape": list(arr.shape), "dtype": "<f4"}
    sidecar.update(meta)
    (out_dir / f"{name}.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )
    return bin_path


def load_array(out_dir: str | Path, name: str) -> np.ndarray:
    out_dir = Path(out_dir)
    sidecar = json.loads((out_dir / f"{name}.json").read_text())
    raw = np.frombuffer((out_dir / f"{name}.bin").read_bytes(), dtype="<f4")
    return raw.reshape(sidecar["shape"]).copy()


def to_grid(vector: np.ndarray) -> np.ndarray:
    """Reshape a length-N attention row to its G x G grid (row-major)."""
    n = vector.shape[-1]
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"attention length {n} is not a square grid")
    return vector.reshape(vector.shape[:-1] + (g, g))


def upsample_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float32))
    t = t.unsqueeze(0).unsqueeze(0)
    up = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def render_overlay(
    image: np.ndarray,
    grid: np.ndarray,
    path: str | Path,
    cmap: str = "viridis",
    alpha: float = 0.5,
) -> Path:
    """Blend an upsampled heatmap onto a uint8 HxWx3 image and save PNG.

    The heatmap is rescaled by its max for visibility; the raw
    (normalized) weights live in the .bin exports.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    heat = upsample_bilinear(grid, image.shape[0], image.shape[1])
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    colored = colormaps[cmap](heat)[..., :3]  # [H, W, 3] in [0, 1]
    base = image.astype(np.float64) / 255.0
    blend = (1 - alpha) * base + alpha * colored
    out = np.clip(np.rint(blend * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(out).save(path)
    return path


def _head_summaries(weights: np.ndarray) -> dict[str, np.ndarray]:
    """[h, Q, K] -> {"head_mean": [K], "head_max": [K]} row-averaged."""
    per_head = weights.mean(axis=-2)  # [h, K]: average over query rows
    return {"head_mean": per_head.mean(axis=0), "head_max": per_head.max(axis=0)}


def export_attention(
    out_dir: str | Path,
    maps: dict,
    tokens: list[str],
    after_images: dict[str, np.ndarray] | None = None,
    render: bool = True,
) -> list[Path]:
    """Write all attention artifacts for one generated caption.

    ``maps`` is the record produced by ``ChangeCaptioner.generate(...,
    record=True)``: encoder maps keyed by module, plus per-layer decoder
    maps.  ``tokens`` are the generated words (specials stripped).
    ``after_images`` supplies overlay backgrounds keyed by modality
    ("rgb" -> RGB after image, "sem" -> semantic after map).
    """
    out_dir = Path(out_dir)
    written: list[Path] = []

    for key, weights in sorted(maps.get("encoder", {}).items()):
        w = weights.detach().cpu().numpy().astype(np.float32)
        modality = key.split(".")[-1].rsplit("_", 1)[0]
        name = f"encoder_{key.replace('.', '_')}"
        written.append(
            save_array(out_dir, name, w, {"module": key, "modality": modality,
                                          "token_index": None})
        )
        for agg, vec in _head_summaries(w).items():
            grid = to_grid(vec)
            written.append(
                save_array(out_dir, f"{name}_{agg}", grid,
                           {"module": key, "modality": modality,
                            "aggregate": agg, "token_index": None})
            )

    decoder_layers = maps.get("decoder", [])
    if decoder_layers:
        layer = decoder_layers[-1]  # deepest layer's maps
        streams = [k for k in layer if k != "self"]
        content_idx = [i for i, t in enumerate(tokens) if t not in STOPWORDS]
        if not content_idx:
            content_idx = list(range(len(tokens)))
        for m in streams:
            w = layer[m].detach().cpu().numpy().astype(np.float32)  # [h, T, N]
            summary_grids: dict[str, list[np.ndarray]] = {"head_mean": [], "head_max": []}
            for i, raw_token in enumerate(tokens):
                token = "".join(c if c.isalnum() else "_" for c in raw_token)
                # Row i is the prefix position that emitted generated
                # token i (row 0 is the start position).
                row = w[:, i, :]
                per_head_mean = row.mean(axis=0)
                per_head_max = row.max(axis=0)
                for agg, vec in (("head_mean", per_head_mean), ("head_max", per_head_max)):
                    grid = to_grid(vec)
                    name = f"decoder_{m}_token{i:02d}_{token}_{agg}"
                    written.append(
                        save_array(out_dir, name, grid,
                                   {"module": f"decoder.cross.{m}", "modality": m,
                                    "token": token, "token_index": i, "aggregate": agg})
                    )
                    if i in content_idx:
                        summary_grids[agg].append(grid)
                    if (render and after_images is not None and m in after_images
                            and agg == "head_mean" and i in content_idx):
                        written.append(
                            render_overlay(
                                after_images[m], grid,
                                out_dir / f"overlay_{m}_token{i:02d}_{token}.png",
                            )
                        )
            for agg, grids in summary_grids.items():
                if not grids:
                    continue
                mean_grid = np.mean(grids, axis=0)
                name = f"decoder_{m}_summary_{agg}"
                written.append(
                    save_array(out_dir, name, mean_grid,
                               {"module": f"decoder.cross.{m}", "modality": m,
                                "aggregate": agg, "token_index": None,
                                "summary": "mean over content words"})
                )
                if render and after_images is not None and m in after_images:
                    written.append(
                        render_overlay(after_images[m], mean_grid,
                                       out_dir / f"overlay_{m}_summary_{agg}.png")
                    )
    return written
