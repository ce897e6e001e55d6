"""Deterministic checkpoint container.

Layout: an 8-byte magic, an 8-byte little-endian header length, a JSON
header (sorted keys, compact separators), then the raw array payload —
each array C-contiguous little-endian, concatenated in sorted name
order.  No timestamps or environment data are written, so saving the
same state twice yields byte-identical files; that property underpins
the training-determinism checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MMCCKPT1"
FORMAT_VERSION = 1


def _to_little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim > 0:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_arrays(
    path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    payload_parts = []
    offset = 0
    for name in sorted(arrays):
        arr = _to_little_endian(arrays[name])
        data = arr.tobytes()
        records.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payload_parts.append(data)
        offset += len(data)
    header = {"format_version": FORMAT_VERSION, "meta": meta, "arrays": records}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for part in payload_parts:
            f.write(part)
    return path


@dataclass
class CheckpointData:
    arrays: dict[str, np.ndarray]
    meta: dict


def load_arrays(path: str | Path) -> CheckpointData:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file (bad magic)")
    header_len = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16 : 16 + header_len].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {header.get('format_version')}"
        )
    base = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for rec in header["arrays"]:
        start = base + rec["offset"]
        raw = blob[start : start + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"]))
        arrays[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return CheckpointData(arrays=arrays, meta=header["meta"])


# ---------------------------------------------------------------------------
# Model-level save/load


def save_checkpoint(
    path: str | Path,
    model,
    vocab,
    optimizer=None,
    *,
    epoch: int = 0,
    step: int = 0,
    best_sm: float | None = None,
    train_config: dict | None = None,
) -> Path:
    """Serialize model params/buffers, optimizer moments, and rng state."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    meta: dict = {
        "model_config": model.config.to_dict(),
        "vocab_tokens": vocab.to_tokens(),
        "epoch": epoch,
        "step": step,
        "best_sm": best_sm,
        "train_config": train_config,
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        meta["optim_param_groups"] = json.loads(json.dumps(state["param_groups"]))
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                if isinstance(value, torch.Tensor):
                    arrays[f"optim.{idx}.{key}"] = value.detach().cpu().numpy()
                else:
                    arrays[f"optim.{idx}.{key}"] = np.asarray(value)
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    return save_arrays(path, arrays, meta)


def load_checkpoint(path: str | Path) -> CheckpointData:
    return load_arrays(path)


def build_model(data: CheckpointData):
    """Reconstruct (model, vocab) from checkpoint data."""
    from .dataset import Vocabulary
    from .model import ChangeCaptioner, ModelConfig

    config = ModelConfig.from_dict(data.meta["model_config"])
    vocab = Vocabulary.from_tokens(data.meta["vocab_tokens"])
    model = ChangeCaptioner(config)
    state = {}
    for name, arr in data.arrays.items():
        if name.startswith("model."):
            state[name[len("model."):]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    # Match the serialized parameter dtype (float32 vs float64 training).
    dtypes = {v.dtype for v in state.values() if v.is_floating_point()}
    if dtypes == {torch.float64}:
        model.double()
    model.eval()
    return model, vocab


def restore_optimizer(optimizer, data: CheckpointData, restore_rng: bool = True) -> None:
    """Load Adam moments back into a freshly built optimizer (for resume)."""
    groups = data.meta.get("optim_param_groups")
    if groups is None:
        raise ValueError("checkpoint has no optimizer state")
    for group in groups:
        # JSON turns Adam's betas tuple into a list; restore it.
        if isinstance(group.get("betas"), list):
            group["betas"] = tuple(group["betas"])
    state: dict = {}
    for name, arr in data.arrays.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    optimizer.load_state_dict({"state": state, "param_groups": groups})
    if restore_rng and "rng.torch" in data.arrays:
        torch.set_rng_state(torch.from_numpy(data.arrays["rng.torch"].copy()))
