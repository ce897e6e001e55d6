"""Caption-aware corpus augmentation.

Four transforms: two photometric (``blur``, ``brighten``) that leave
captions and semantic maps untouched, and two geometric (``mirror_h``,
``rotate_180``) that transform all four images and rewrite directional
words in the captions simultaneously.  Each train/val entry gets exactly
one transform, chosen deterministically from a seed and the entry id;
test entries are never augmented.
"""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import convolve1d

from .dataset import (
    IMAGE_DIRS,
    DatasetEntry,
    detokenize,
    tokenize,
    write_index,
)

KINDS = ("blur", "brighten", "mirror_h", "rotate_180")

# Simultaneous token substitutions for the geometric transforms.  Both
# maps are involutions, so applying a transform twice restores the
# original token sequence.
MIRROR_H_MAP = {"left": "right", "right": "left"}
ROTATE_180_MAP = {
    "left": "right",
    "right": "left",
    "top": "bottom",
    "bottom": "top",
}

CAPTION_MAPS: dict[str, Mapping[str, str]] = {
    "blur": {},
    "brighten": {},
    "mirror_h": MIRROR_H_MAP,
    "rotate_180": ROTATE_180_MAP,
}


@dataclass(frozen=True)
class AugmentSpec:
    """Parameters of one augmentation pass."""

    kind: str
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    brighten_delta: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; choices: {KINDS}")
        if self.blur_kernel < 3 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur kernel must be odd and >= 3, got {self.blur_kernel}")
        if self.blur_sigma <= 0:
            raise ValueError(f"blur sigma must be positive, got {self.blur_sigma}")
        if not 0 <= self.brighten_delta <= 255:
            raise ValueError(f"brighten delta must be in [0, 255], got {self.brighten_delta}")

    @property
    def is_geometric(self) -> bool:
        return self.kind in ("mirror_h", "rotate_180")


def rewrite_tokens(tokens: Sequence[str], mapping: Mapping[str, str]) -> list[str]:
    """Apply all substitutions simultaneously (single pass)."""
    return [mapping.get(t, t) for t in tokens]


def rewrite_caption(sentence: str, kind: str) -> str:
    """Rewrite one raw sentence for the given transform kind.

    Photometric kinds return the sentence verbatim; geometric kinds
    tokenize, substitute directional words in one simultaneous pass, and
    rejoin.  On token sequences the rewrite is an involution.
    """
    mapping = CAPTION_MAPS[kind]
    if not mapping:
        return sentence
    return detokenize(rewrite_tokens(tokenize(sentence), mapping))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Sampled, normalized 1-D Gaussian kernel."""
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, kernel: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur with reflect borders on a uint8 image."""
    k = _gaussian_kernel(kernel, sigma)
    out = img.astype(np.float64)
    out = convolve1d(out, k, axis=0, mode="reflect")
    out = convolve1d(out, k, axis=1, mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def brighten(img: np.ndarray, delta: int = 30) -> np.ndarray:
    """Add ``delta`` to every pixel with saturation at 255."""
    return np.clip(img.astype(np.int32) + delta, 0, 255).astype(np.uint8)


def mirror_h(img: np.ndarray) -> np.ndarray:
    """Mirror horizontally (left-right flip)."""
    return np.ascontiguousarray(img[:, ::-1])


def rotate_180(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::-1, ::-1])


def transform_images(
    images: Mapping[str, np.ndarray], spec: AugmentSpec
) -> dict[str, np.ndarray]:
    """Transform an entry's four images according to ``spec``.

    Photometric transforms touch only the RGB pair; geometric transforms
    apply to all four images so semantic maps stay aligned.
    """
    out: dict[str, np.ndarray] = {}
    for role, img in images.items():
        if spec.kind == "blur":
            out[role] = gaussian_blur(img, spec.blur_kernel, spec.blur_sigma) \
                if role.startswith("rgb") else img.copy()
        elif spec.kind == "brighten":
            out[role] = brighten(img, spec.brighten_delta) \
                if role.startswith("rgb") else img.copy()
        elif spec.kind == "mirror_h":
            out[role] = mirror_h(img)
        else:
            out[role] = rotate_180(img)
    return out


def choose_kind(seed: int, entry_id: str) -> str:
    """Deterministic per-entry transform choice.

    Hashes ``"{seed}:{entry_id}"`` with sha256 (never the process-seeded
    builtin ``hash``) so the choice is stable across runs and platforms.
    """
    digest = hashlib.sha256(f"{seed}:{entry_id}".encode("utf-8")).digest()
    return KINDS[int.from_bytes(digest[:8], "big") % len(KINDS)]


def augment_entry(
    entry: DatasetEntry, spec: AugmentSpec, out_root: str | Path
) -> DatasetEntry:
    """Write one transformed copy of ``entry`` under ``out_root``.

    The new entry id is ``{id}_{kind}``; split and category carry over.
    """
    out_root = Path(out_root)
    images = entry.load_images()
    transformed = transform_images(images, spec)
    new_id = f"{entry.id}_{spec.kind}"
    for role, img in transformed.items():
        path = out_root / IMAGE_DIRS[role] / f"{new_id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path)
    sentences = [rewrite_caption(s, spec.kind) for s in entry.sentences]
    return DatasetEntry(
        id=new_id,
        split=entry.split,
        category=entry.category,
        sentences=sentences,
        root=out_root,
    )


def _copy_entry(entry: DatasetEntry, out_root: Path) -> DatasetEntry:
    for role in IMAGE_DIRS:
        src = entry.image_path(role)
        dst = out_root / IMAGE_DIRS[role] / f"{entry.id}.png"
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dst)
    return DatasetEntry(
        id=entry.id,
        split=entry.split,
        category=entry.category,
        sentences=list(entry.sentences),
        root=out_root,
    )


def augmented_split_counts(counts: Mapping[str, int]) -> dict[str, int]:
    """The counting rule: train and val double, test stays unchanged."""
    return {
        "train": 2 * counts.get("train", 0),
        "val": 2 * counts.get("val", 0),
        "test": counts.get("test", 0),
    }


def augment_corpus(
    entries: Sequence[DatasetEntry], seed: int, out_root: str | Path
) -> list[DatasetEntry]:
    """Build the augmented corpus under ``out_root``.

    Every original entry is copied through; each train/val entry
    additionally gets exactly one transformed copy, so train and val
    double while test stays untouched.  Writes the combined
    ``index.json`` and returns the combined entry list (originals first,
    in input order, then augmented in input order).
    """
    out_root = Path(out_root)
    originals = [_copy_entry(e, out_root) for e in entries]
    augmented: list[DatasetEntry] = []
    for entry in entries:
        if entry.split == "test":
            continue
        kind = choose_kind(seed, entry.id)
        augmented.append(augment_entry(entry, AugmentSpec(kind=kind, seed=seed), out_root))
    combined = originals + augmented
    write_index(combined, out_root)
    return combined
