"""Data model for bitemporal change-caption corpora.

A corpus lives under a root directory with four image folders (``A``,
``B``, ``labelA``, ``labelB`` — RGB before/after and semantic map
before/after) plus an ``index.json`` describing entries.  Every entry has
an id, a split, a change category, and exactly five reference sentences.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")

# Image folder layout: role -> subdirectory under the corpus root.
IMAGE_DIRS = {
    "rgb_before": "A",
    "rgb_after": "B",
    "sem_before": "labelA",
    "sem_after": "labelB",
}

REFERENCES_PER_ENTRY = 5


class CorpusError(Exception):
    """Base class for corpus problems."""


class LoadError(CorpusError):
    """A referenced file is missing or unreadable."""


class SchemaError(CorpusError):
    """The index or an entry violates the corpus schema."""


class LandCover(str, Enum):
    """The six land-cover classes used for change categories."""

    LOW_VEGETATION = "low_vegetation"
    NVG_SURFACE = "nvg_surface"
    TREE = "tree"
    WATER = "water"
    BUILDING = "building"
    PLAYGROUND = "playground"


# Canonical semantic-map palette (RGB).  Black marks unlabeled /
# unchanged pixels; the six classes get distinct saturated colors.
SEM_PALETTE: dict[LandCover | None, tuple[int, int, int]] = {
    None: (0, 0, 0),
    LandCover.LOW_VEGETATION: (0, 128, 0),
    LandCover.NVG_SURFACE: (128, 128, 128),
    LandCover.TREE: (0, 255, 0),
    LandCover.WATER: (0, 0, 255),
    LandCover.BUILDING: (255, 0, 0),
    LandCover.PLAYGROUND: (255, 255, 0),
}

# Channel order for the one-hot semantic input mode: unlabeled first,
# then classes in enum declaration order.
SEM_CLASS_ORDER: tuple[LandCover | None, ...] = (None,) + tuple(LandCover)


@dataclass(frozen=True)
class ChangeCategory:
    """A change category: either no-change or a (from, to) class pair."""

    from_class: LandCover | None
    to_class: LandCover | None

    def __post_init__(self) -> None:
        if (self.from_class is None) != (self.to_class is None):
            raise SchemaError(
                "change category must set both classes or neither, got "
                f"({self.from_class}, {self.to_class})"
            )
        if self.from_class is not None and self.from_class == self.to_class:
            raise SchemaError(f"change category cannot map {self.from_class} to itself")

    @property
    def is_change(self) -> bool:
        return self.from_class is not None

    def __str__(self) -> str:
        if not self.is_change:
            return "no_change"
        return f"{self.from_class.value}_to_{self.to_class.value}"

    @classmethod
    def parse(cls, text: str) -> "ChangeCategory":
        if text == "no_change":
            return cls(None, None)
        m = re.fullmatch(r"(\w+)_to_(\w+)", text)
        if m is None:
            raise SchemaError(f"unparseable change category: {text!r}")
        try:
            return cls(LandCover(m.group(1)), LandCover(m.group(2)))
        except ValueError as exc:
            raise SchemaError(f"unknown land-cover class in category {text!r}") from exc


def all_categories() -> list[ChangeCategory]:
    """All 31 categories: no_change plus the 30 ordered class transitions.

    Transitions are sorted lexicographically by their string form (local
    convention; the serialized form is the stable identifier).
    """
    cats = [
        ChangeCategory(a, b)
        for a in LandCover
        for b in LandCover
        if a != b
    ]
    cats.sort(key=str)
    return [ChangeCategory(None, None)] + cats


@dataclass
class DatasetEntry:
    """One bitemporal scene: four images plus five reference sentences."""

    id: str
    split: str
    category: ChangeCategory
    sentences: list[str]
    root: Path | None = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise SchemaError(f"entry {self.id!r}: unknown split {self.split!r}")
        if len(self.sentences) != REFERENCES_PER_ENTRY:
            raise SchemaError(
                f"entry {self.id!r}: expected {REFERENCES_PER_ENTRY} sentences, "
                f"got {len(self.sentences)}"
            )

    @property
    def is_change(self) -> bool:
        return self.category.is_change

    @property
    def captions(self) -> list[list[str]]:
        """Tokenized reference sentences."""
        return [tokenize(s) for s in self.sentences]

    def image_path(self, role: str) -> Path:
        if role not in IMAGE_DIRS:
            raise ValueError(f"unknown image role {role!r}")
        if self.root is None:
            raise LoadError(f"entry {self.id!r} has no corpus root; cannot locate images")
        return Path(self.root) / IMAGE_DIRS[role] / f"{self.id}.png"

    def load_images(self) -> dict[str, np.ndarray]:
        """Load all four images as uint8 HxWx3 arrays, keyed by role."""
        images = {}
        for role in IMAGE_DIRS:
            path = self.image_path(role)
            if not path.is_file():
                raise LoadError(f"entry {self.id!r}: missing image file {path}")
            with Image.open(path) as im:
                images[role] = np.asarray(im.convert("RGB"), dtype=np.uint8)
        first = images["rgb_before"].shape
        for role, arr in images.items():
            if arr.shape != first:
                raise SchemaError(
                    f"entry {self.id!r}: image size mismatch, {role} is "
                    f"{arr.shape[:2]} but rgb_before is {first[:2]}"
                )
        return images


def tokenize(caption: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace.

    Deterministic and idempotent: runs of letters/digits become tokens,
    everything else is a separator.
    """
    return re.findall(r"[a-z0-9]+", caption.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def load_index(root: str | Path, *, check_files: bool = True) -> list[DatasetEntry]:
    """Load and validate ``index.json`` under ``root``.

    Splits are read from the index, never recomputed.  When
    ``check_files`` is set (the default) every entry's four images must
    exist and share one size; a missing file raises :class:`LoadError`
    naming the entry id.
    """
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise LoadError(f"no index.json under {root}")
    try:
        raw = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"index.json is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "entries" not in raw:
        raise SchemaError('index.json must be an object with an "entries" list')

    entries: list[DatasetEntry] = []
    seen: set[str] = set()
    for item in raw["entries"]:
        try:
            entry = DatasetEntry(
                id=str(item["id"]),
                split=str(item["split"]),
                category=ChangeCategory.parse(str(item["category"])),
                sentences=[str(s) for s in item["sentences"]],
                root=root,
            )
        except KeyError as exc:
            raise SchemaError(f"index entry missing field {exc}") from exc
        if entry.id in seen:
            raise SchemaError(f"duplicate entry id {entry.id!r}")
        seen.add(entry.id)
        if check_files:
            size = None
            for role in IMAGE_DIRS:
                path = entry.image_path(role)
                if not path.is_file():
                    raise LoadError(f"entry {entry.id!r}: missing image file {path}")
                with Image.open(path) as im:
                    if size is None:
                        size = im.size
                    elif im.size != size:
                        raise SchemaError(
                            f"entry {entry.id!r}: image size mismatch, {role} is "
                            f"{im.size} but expected {size}"
                        )
        entries.append(entry)
    return entries


def write_index(entries: Sequence[DatasetEntry], root: str | Path) -> Path:
    """Write ``index.json`` for the given entries under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    payload = {
        "entries": [
            {
                "id": e.id,
                "split": e.split,
                "category": str(e.category),
                "sentences": list(e.sentences),
            }
            for e in entries
        ]
    }
    path = root / "index.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def split_counts(entries: Iterable[DatasetEntry]) -> dict[str, int]:
    counts = Counter(e.split for e in entries)
    return {s: counts.get(s, 0) for s in SPLITS}


def category_counts(entries: Iterable[DatasetEntry]) -> dict[str, int]:
    return dict(Counter(str(e.category) for e in entries))


# ---------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Token <-> id mapping with fixed special ids.

    Special ids: start=0, end=1, pad=2, unk=3.  Content tokens follow,
    ordered by descending corpus frequency with lexicographic
    tie-breaking, so builds are deterministic.  ``size`` counts content
    tokens only (specials excluded); ``len()`` includes specials.
    """

    START = 0
    END = 1
    PAD = 2
    UNK = 3
    SPECIAL_TOKENS = ("<start>", "<end>", "<pad>", "<unk>")

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(self.SPECIAL_TOKENS) + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("vocabulary tokens must be unique and non-special")
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)
        }

    @property
    def size(self) -> int:
        """Number of content tokens (specials excluded)."""
        return len(self.id_to_token) - len(self.SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> list[int]:
        """Map tokens to ids; out-of-vocabulary tokens map to unk."""
        return [self.token_to_id.get(t, self.UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Map ids back to tokens (specials included verbatim)."""
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise ValueError(f"token id {i} out of range")
            out.append(self.id_to_token[i])
        return out

    def to_tokens(self) -> list[str]:
        """Content tokens in id order (for serialization)."""
        return self.id_to_token[len(self.SPECIAL_TOKENS):]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls(tokens)


def build_vocabulary(
    entries: Sequence[DatasetEntry], min_count: int = 1
) -> Vocabulary:
    """Build a vocabulary over all caption tokens of ``entries``."""
    if not entries:
        raise ValueError("cannot build a vocabulary from an empty entry list")
    counts: Counter[str] = Counter()
    for entry in entries:
        for caption in entry.captions:
            counts.update(caption)
    if not counts:
        raise ValueError("entries contain no caption tokens")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Caption linting

# Annotation-guideline replacements for directional vocabulary.
DIRECTIONAL_REPLACEMENTS = {
    "up": "top",
    "upper": "top",
    "above": "top",
    "below": "bottom",
    "down": "bottom",
    "lower": "bottom",
    "leftside": "left",
    "rightside": "right",
}

VOCABULARY_BUDGET = 2000


@dataclass(frozen=True)
class LintFinding:
    entry_id: str
    rule: str
    detail: str

    def __str__(self) -> str:
        return f"{self.entry_id}\t{self.rule}\t{self.detail}"


def lint_captions(entries: Sequence[DatasetEntry]) -> list[LintFinding]:
    """Check annotation guidelines; returns one finding per violation.

    Rules: non-canonical directional tokens, a 4-gram repeated within a
    single caption, and a corpus-level vocabulary budget of
    ``VOCABULARY_BUDGET`` distinct words.
    """
    findings: list[LintFinding] = []
    vocab: set[str] = set()
    for entry in entries:
        for j, caption in enumerate(entry.captions):
            vocab.update(caption)
            for token in caption:
                if token in DIRECTIONAL_REPLACEMENTS:
                    findings.append(
                        LintFinding(
                            entry.id,
                            "directional",
                            f'caption {j}: "{token}" should be '
                            f'"{DIRECTIONAL_REPLACEMENTS[token]}"',
                        )
                    )
            grams = Counter(
                tuple(caption[k : k + 4]) for k in range(len(caption) - 3)
            )
            for gram, c in sorted(grams.items()):
                if c > 1:
                    findings.append(
                        LintFinding(
                            entry.id,
                            "repeated_4gram",
                            f'caption {j}: "{" ".join(gram)}" appears {c} times',
                        )
                    )
    if len(vocab) >= VOCABULARY_BUDGET:
        findings.append(
            LintFinding(
                "<corpus>",
                "vocabulary_budget",
                f"corpus uses {len(vocab)} distinct words "
                f"(budget {VOCABULARY_BUDGET})",
            )
        )
    return findings


# ---------------------------------------------------------------------------
# Corpus statistics


def length_histogram(captions: Iterable[Sequence[str]]) -> dict[int, int]:
    """Histogram of caption lengths (in tokens)."""
    return dict(Counter(len(c) for c in captions))


def unique_ngram_count(captions: Iterable[Sequence[str]], n: int = 4) -> int:
    """Number of distinct n-grams across the given captions."""
    grams: set[tuple[str, ...]] = set()
    for caption in captions:
        grams.update(
            tuple(caption[k : k + n]) for k in range(len(caption) - n + 1)
        )
    return len(grams)


@dataclass
class CorpusStats:
    """Descriptive statistics over a corpus."""

    sentence_length_hist: dict[str, dict[int, int]]
    word_frequencies: dict[str, int]
    category_hist: dict[str, int]
    avg_caption_length_per_category: dict[str, float]
    unique_4grams_per_image: dict[str, int]

    @property
    def caption_lengths(self) -> list[int]:
        out: list[int] = []
        for hist in self.sentence_length_hist.values():
            for length, count in hist.items():
                out.extend([length] * count)
        return out

    @property
    def mean_sentence_length(self) -> float:
        lengths = self.caption_lengths
        return float(np.mean(lengths)) if lengths else 0.0

    @property
    def std_sentence_length(self) -> float:
        lengths = self.caption_lengths
        return float(np.std(lengths)) if lengths else 0.0


def compute_stats(entries: Sequence[DatasetEntry]) -> CorpusStats:
    hist: dict[str, dict[int, int]] = {}
    freqs: Counter[str] = Counter()
    per_cat_lengths: dict[str, list[int]] = {}
    unique4: dict[str, int] = {}
    for entry in entries:
        captions = entry.captions
        split_hist = hist.setdefault(entry.split, {})
        for caption in captions:
            split_hist[len(caption)] = split_hist.get(len(caption), 0) + 1
            freqs.update(caption)
            per_cat_lengths.setdefault(str(entry.category), []).append(len(caption))
        unique4[entry.id] = unique_ngram_count(captions, 4)
    avg_per_cat = {
        cat: float(np.mean(lengths)) for cat, lengths in per_cat_lengths.items()
    }
    return CorpusStats(
        sentence_length_hist=hist,
        word_frequencies=dict(freqs),
        category_hist=category_counts(entries),
        avg_caption_length_per_category=avg_per_cat,
        unique_4grams_per_image=unique4,
    )


def write_stats(stats: CorpusStats, out_dir: str | Path) -> list[Path]:
    """Write the statistics as CSV files suitable for plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "sentence_length_hist.csv"
    with path.open("w") as f:
        f.write("split,length,count\n")
        for split in sorted(stats.sentence_length_hist):
            for length in sorted(stats.sentence_length_hist[split]):
                f.write(f"{split},{length},{stats.sentence_length_hist[split][length]}\n")
    written.append(path)

    path = out_dir / "word_frequencies.csv"
    with path.open("w") as f:
        f.write("word,count\n")
        for word in sorted(stats.word_frequencies, key=lambda w: (-stats.word_frequencies[w], w)):
            f.write(f"{word},{stats.word_frequencies[word]}\n")
    written.append(path)

    path = out_dir / "category_hist.csv"
    with path.open("w") as f:
        f.write("category,count,avg_caption_length\n")
        for cat in sorted(stats.category_hist):
            avg = stats.avg_caption_length_per_category.get(cat, 0.0)
            f.write(f"{cat},{stats.category_hist[cat]},{avg:.4f}\n")
    written.append(path)

    path = out_dir / "unique_4grams_per_image.csv"
    with path.open("w") as f:
        f.write("entry_id,unique_4grams\n")
        for entry_id in sorted(stats.unique_4grams_per_image):
            f.write(f"{entry_id},{stats.unique_4grams_per_image[entry_id]}\n")
    written.append(path)

    path = out_dir / "summary.csv"
    with path.open("w") as f:
        f.write("metric,value\n")
        f.write(f"mean_sentence_length,{stats.mean_sentence_length:.6f}\n")
        f.write(f"std_sentence_length,{stats.std_sentence_length:.6f}\n")
        f.write(f"vocabulary_size,{len(stats.word_frequencies)}\n")
    written.append(path)
    return written
