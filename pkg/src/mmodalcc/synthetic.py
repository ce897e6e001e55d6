"""Synthetic fixture corpora for tests and demos.

Generates small, fully deterministic corpora in the on-disk layout that
:func:`mmodalcc.dataset.load_index` expects: four image folders plus
``index.json``.  Scenes are procedural (smooth background, one changed
rectangle per change entry) and captions come from fixed templates, so
counts and content are reproducible byte-for-byte.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (
    IMAGE_DIRS,
    ChangeCategory,
    DatasetEntry,
    LandCover,
    SEM_PALETTE,
    all_categories,
    load_index,
    write_index,
)

# Human-ish phrases for land-cover classes, used in generated captions.
CLASS_PHRASES = {
    LandCover.LOW_VEGETATION: "meadow",
    LandCover.NVG_SURFACE: "bare ground",
    LandCover.TREE: "tree",
    LandCover.WATER: "pond",
    LandCover.BUILDING: "house",
    LandCover.PLAYGROUND: "playground",
}

POSITIONS = ("top left", "top right", "bottom left", "bottom right", "center")

NO_CHANGE_SENTENCES = [
    "there is no change",
    "the scene remains the same",
    "nothing has changed",
    "the two scenes seem identical",
    "no change has occurred",
]


def _change_sentences(frm: LandCover, to: LandCover, pos: str) -> list[str]:
    f, t = CLASS_PHRASES[frm], CLASS_PHRASES[to]
    return [
        f"a {t} appears at the {pos}",
        f"the {f} at the {pos} becomes a {t}",
        f"a {t} replaces the {f} at the {pos}",
        f"there is a new {t} at the {pos}",
        f"the {f} at the {pos} has changed into a {t}",
    ]


def _rect_for_position(pos: str, size: int) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) of the changed rectangle for a position."""
    h = size // 2
    q = size // 4
    slots = {
        "top left": (0, h, 0, h),
        "top right": (0, h, h, size),
        "bottom left": (h, size, 0, h),
        "bottom right": (h, size, h, size),
        "center": (q, q + h, q, q + h),
    }
    r0, r1, c0, c1 = slots[pos]
    # Shrink to leave a margin inside the slot.
    m = max(1, size // 16)
    return r0 + m, r1 - m, c0 + m, c1 - m


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.integers(60, 180, size=3)
    grad = np.linspace(0, 40, size).reshape(size, 1, 1)
    noise = rng.integers(0, 25, size=(size, size, 3))
    img = base.reshape(1, 1, 3) + grad + noise
    return np.clip(img, 0, 255).astype(np.uint8)


def _save(img: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def _write_entry_images(
    root: Path,
    entry_id: str,
    rng: np.random.Generator,
    size: int,
    category: ChangeCategory,
    pos: str,
) -> None:
    rgb_before = _background(rng, size)
    sem_before = np.zeros((size, size, 3), dtype=np.uint8)
    rgb_after = rgb_before.copy()
    sem_after = sem_before.copy()
    if category.is_change:
        r0, r1, c0, c1 = _rect_for_position(pos, size)
        from_color = SEM_PALETTE[category.from_class]
        to_color = SEM_PALETTE[category.to_class]
        sem_before[r0:r1, c0:c1] = from_color
        sem_after[r0:r1, c0:c1] = to_color
        # Paint the changed object into the after RGB with a distinct tint.
        tint = np.array(to_color, dtype=np.int32)
        patch = (0.4 * rgb_after[r0:r1, c0:c1].astype(np.int32) + 0.6 * tint)
        rgb_after[r0:r1, c0:c1] = np.clip(patch, 0, 255).astype(np.uint8)
    for role, img in {
        "rgb_before": rgb_before,
        "rgb_after": rgb_after,
        "sem_before": sem_before,
        "sem_after": sem_after,
    }.items():
        _save(img, root / IMAGE_DIRS[role] / f"{entry_id}.png")


def make_corpus(
    root: str | Path,
    n_entries: int = 40,
    image_size: int = 64,
    seed: int = 0,
) -> list[DatasetEntry]:
    """Generate a corpus with an exact 7:1:2 train/val/test split.

    ``n_entries`` must be divisible by 10 so the split is exact by
    construction.  Roughly 30% of entries are no-change scenes; the rest
    cycle through the 30 class transitions.
    """
    if n_entries % 10 != 0:
        raise ValueError("n_entries must be divisible by 10 for an exact 7:1:2 split")
    root = Path(root)
    rng = np.random.default_rng(seed)
    transitions = [c for c in all_categories() if c.is_change]

    n_train = n_entries * 7 // 10
    n_val = n_entries // 10
    entries: list[DatasetEntry] = []
    t = 0
    for i in range(n_entries):
        if i < n_train:
            split = "train"
        elif i < n_train + n_val:
            split = "val"
        else:
            split = "test"
        if i % 10 < 3:
            category = ChangeCategory(None, None)
            sentences = list(NO_CHANGE_SENTENCES)
            pos = POSITIONS[i % len(POSITIONS)]
        else:
            category = transitions[t % len(transitions)]
            t += 1
            pos = POSITIONS[i % len(POSITIONS)]
            sentences = _change_sentences(category.from_class, category.to_class, pos)
        entry_id = f"scene_{i:04d}"
        _write_entry_images(root, entry_id, rng, image_size, category, pos)
        entries.append(
            DatasetEntry(
                id=entry_id, split=split, category=category,
                sentences=sentences, root=root,
            )
        )
    write_index(entries, root)
    return load_index(root)


OVERFIT_CAPTIONS = [
    "a house appears at the top left",
    "a pond appears at the bottom right",
    "a tree appears at the top right",
    "a playground appears at the bottom left",
    "the meadow becomes a house at the center",
    "a house replaces the bare ground",
    "nothing has changed",
    "the pond has changed into a meadow",
]

OVERFIT_CATEGORIES = [
    "nvg_surface_to_building",
    "nvg_surface_to_water",
    "nvg_surface_to_tree",
    "nvg_surface_to_playground",
    "low_vegetation_to_building",
    "nvg_surface_to_building",
    "no_change",
    "water_to_low_vegetation",
]


def make_overfit_corpus(
    root: str | Path, image_size: int = 32, seed: int = 7
) -> list[DatasetEntry]:
    """An 8-entry all-train corpus where each entry has one caption
    repeated five times — a memorization target for optimizer checks.

    Scene images are pairwise distinct so a model can separate entries.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    positions = ["top left", "bottom right", "top right", "bottom left",
                 "center", "center", "center", "center"]
    entries = []
    for i, caption in enumerate(OVERFIT_CAPTIONS):
        category = ChangeCategory.parse(OVERFIT_CATEGORIES[i])
        entry_id = f"fit_{i}"
        _write_entry_images(root, entry_id, rng, image_size, category, positions[i])
        entries.append(
            DatasetEntry(
                id=entry_id, split="train", category=category,
                sentences=[caption] * 5, root=root,
            )
        )
    write_index(entries, root)
    return load_index(root)
