"""Corpus-level caption evaluation metrics.

Implements BLEU-1..4 (corpus-level, clipped modified precision, closest
reference length, no smoothing), ROUGE-L (per-item max over references,
beta=1.2), a simplified METEOR (exact + Porter-stem matching stages
only), and CIDEr-D (tf-idf n-gram cosine with length penalty).  The
composite S_m* averages whichever of {BLEU-4, METEOR, ROUGE-L, CIDEr-D,
SPICE} are present.

SPICE needs an external scene-graph parser and is not computed here;
per-item SPICE scores can be supplied from a file and are folded into
the report and the composite when present.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import DatasetEntry, tokenize
from .stem import stem

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA_EXP = 3
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4

METEOR_NOTE = (
    "METEOR: simplified variant with exact and Porter-stem matching stages "
    "only (no synonym or paraphrase tables)"
)


@dataclass
class EvalItem:
    """One evaluation unit: a hypothesis against exactly five references."""

    hypothesis: list[str]
    references: list[list[str]]
    is_change: bool = True

    def __post_init__(self) -> None:
        if len(self.references) != 5:
            raise ValueError(
                f"an eval item carries exactly 5 references, got {len(self.references)}"
            )


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu_n(items: Sequence[EvalItem], n: int) -> float:
    """Corpus-level BLEU-n with clipping and brevity penalty.

    Counts are pooled over the corpus before the geometric mean; the
    effective reference length is the closest to each hypothesis (ties
    resolved toward the shorter reference).  Any zero pooled precision
    makes the score 0 — no smoothing is applied, by design.
    """
    if not items:
        raise ValueError("bleu_n needs at least one item")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    clipped = [0] * n
    guesses = [0] * n
    c = 0
    r = 0
    for item in items:
        hyp = item.hypothesis
        c += len(hyp)
        r += min((abs(len(ref) - len(hyp)), len(ref)) for ref in item.references)[1]
        for k in range(1, n + 1):
            guess = _ngram_counts(hyp, k)
            max_ref: Counter = Counter()
            for ref in item.references:
                for gram, count in _ngram_counts(ref, k).items():
                    if count > max_ref[gram]:
                        max_ref[gram] = count
            clipped[k - 1] += sum(min(count, max_ref[gram]) for gram, count in guess.items())
            guesses[k - 1] += sum(guess.values())
    if c == 0:
        return 0.0
    log_precision = 0.0
    for k in range(n):
        # Log-domain zero guard: an empty or unmatched order zeroes BLEU.
        if clipped[k] == 0 or guesses[k] == 0:
            return 0.0
        log_precision += math.log(clipped[k] / guesses[k])
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_precision / n)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(items: Sequence[EvalItem], beta: float = ROUGE_BETA) -> float:
    """Mean over items of the best F-measure over references."""
    if not items:
        raise ValueError("rouge_l needs at least one item")
    total = 0.0
    for item in items:
        best = 0.0
        for ref in item.references:
            lcs = _lcs_length(item.hypothesis, ref)
            if lcs == 0:
                continue
            precision = lcs / len(item.hypothesis)
            recall = lcs / len(ref)
            denom = recall + (beta ** 2) * precision
            score = (1 + beta ** 2) * precision * recall / denom
            best = max(best, score)
        total += best
    return total / len(items)


# ---------------------------------------------------------------------------
# Simplified METEOR


def _greedy_match(
    hyp: Sequence[str], ref: Sequence[str]
) -> list[tuple[int, int]]:
    """Two-stage unigram alignment: exact tokens, then Porter stems.

    Matching is greedy and deterministic: hypothesis positions are
    visited left to right and take the lowest unmatched reference
    position, which makes identical sentences align as one chunk.
    """
    pairs: list[tuple[int, int]] = []
    used_h: set[int] = set()
    used_r: set[int] = set()
    for key_fn in (lambda t: t, stem):
        ref_keys = [key_fn(t) for t in ref]
        for i, token in enumerate(hyp):
            if i in used_h:
                continue
            key = key_fn(token)
            for j, ref_key in enumerate(ref_keys):
                if j in used_r:
                    continue
                if key == ref_key:
                    pairs.append((i, j))
                    used_h.add(i)
                    used_r.add(j)
                    break
    pairs.sort()
    return pairs


def _chunk_count(pairs: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for h, r in pairs:
        if prev is None or h != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (h, r)
    return chunks


def _meteor_pair(hyp: Sequence[str], ref: Sequence[str]) -> float:
    pairs = _greedy_match(hyp, ref)
    m = len(pairs)
    if m == 0 or not hyp or not ref:
        return 0.0
    precision = m / len(hyp)
    recall = m / len(ref)
    f_mean = (precision * recall) / (
        METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall
    )
    penalty = METEOR_GAMMA * (_chunk_count(pairs) / m) ** METEOR_BETA_EXP
    return f_mean * (1.0 - penalty)


def meteor_simplified(items: Sequence[EvalItem]) -> float:
    """Mean over items of the best simplified-METEOR over references."""
    if not items:
        raise ValueError("meteor_simplified needs at least one item")
    return sum(
        max(_meteor_pair(item.hypothesis, ref) for ref in item.references)
        for item in items
    ) / len(items)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf_vectors(
    tokens: Sequence[str],
    df: Mapping[tuple[str, ...], int],
    log_n: float,
) -> tuple[list[dict[tuple[str, ...], float]], list[float], int]:
    vecs: list[dict[tuple[str, ...], float]] = []
    norms: list[float] = []
    for n in range(1, CIDER_MAX_N + 1):
        counts = _ngram_counts(tokens, n)
        vec = {
            gram: count * (log_n - math.log(max(1.0, df.get(gram, 0))))
            for gram, count in counts.items()
        }
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms, len(tokens)


def cider_d(items: Sequence[EvalItem], sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D: idf-weighted n-gram similarity with a Gaussian length
    penalty, orders 1..4 averaged, scaled by 10.

    Document frequencies come from the reference sets of the corpus
    itself, so a single-item corpus is degenerate (every idf is zero);
    that case returns 0.0 with a warning.
    """
    if not items:
        raise ValueError("cider_d needs at least one item")
    if len(items) < 2:
        warnings.warn(
            "CIDEr-D on a single-item corpus is degenerate (all idf weights "
            "are zero); returning 0.0",
            RuntimeWarning,
            stacklevel=2,
        )
    df: Counter = Counter()
    for item in items:
        seen: set[tuple[str, ...]] = set()
        for ref in item.references:
            for n in range(1, CIDER_MAX_N + 1):
                seen.update(_ngram_counts(ref, n).keys())
        df.update(seen)
    log_n = math.log(len(items))

    total = 0.0
    for item in items:
        hyp_vecs, hyp_norms, hyp_len = _tfidf_vectors(item.hypothesis, df, log_n)
        order_sums = [0.0] * CIDER_MAX_N
        for ref in item.references:
            ref_vecs, ref_norms, ref_len = _tfidf_vectors(ref, df, log_n)
            delta = float(hyp_len - ref_len)
            length_penalty = math.exp(-(delta ** 2) / (2.0 * sigma ** 2))
            for n in range(CIDER_MAX_N):
                num = 0.0
                hv, rv = hyp_vecs[n], ref_vecs[n]
                for gram, value in hv.items():
                    # Clip the hypothesis weight at the reference weight.
                    num += min(value, rv.get(gram, 0.0)) * rv.get(gram, 0.0)
                if hyp_norms[n] > 0 and ref_norms[n] > 0:
                    num /= hyp_norms[n] * ref_norms[n]
                else:
                    num = 0.0
                order_sums[n] += num * length_penalty
        per_order = [s / len(item.references) * 10.0 for s in order_sums]
        total += sum(per_order) / CIDER_MAX_N
    return total / len(items)


# ---------------------------------------------------------------------------
# Composite and report


def s_m_star(
    bleu4: float | None = None,
    meteor: float | None = None,
    rouge: float | None = None,
    cider: float | None = None,
    spice: float | None = None,
) -> float:
    """Mean of whichever component metrics are present."""
    values = [v for v in (bleu4, meteor, rouge, cider, spice) if v is not None]
    if not values:
        raise ValueError("s_m_star needs at least one component metric")
    return sum(values) / len(values)


@dataclass
class SliceScores:
    n_items: int
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge: float
    cider: float | None
    spice: float | None
    s_m: float

    def as_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "BLEU-1": self.bleu1,
            "BLEU-2": self.bleu2,
            "BLEU-3": self.bleu3,
            "BLEU-4": self.bleu4,
            "METEOR": self.meteor,
            "ROUGE-L": self.rouge,
            "CIDEr-D": self.cider,
            "SPICE": self.spice,
            "Sm": self.s_m,
        }


@dataclass
class MetricReport:
    """Scores for the overall corpus and the change/no-change slices."""

    slices: dict[str, SliceScores]
    spice_included: bool
    notes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "slices": {name: s.as_dict() for name, s in self.slices.items()},
            "spice_included": self.spice_included,
            "notes": list(self.notes),
        }

    def to_csv_text(self) -> str:
        lines = [f"# {note}" for note in self.notes]
        lines.append(
            "slice,n_items,BLEU-1,BLEU-2,BLEU-3,BLEU-4,METEOR,ROUGE-L,CIDEr-D,SPICE,Sm"
        )

        def fmt(v: float | None) -> str:
            return "" if v is None else f"{v:.6f}"

        for name in ("overall", "change", "no_change"):
            s = self.slices.get(name)
            if s is None:
                continue
            lines.append(
                f"{name},{s.n_items},{fmt(s.bleu1)},{fmt(s.bleu2)},{fmt(s.bleu3)},"
                f"{fmt(s.bleu4)},{fmt(s.meteor)},{fmt(s.rouge)},{fmt(s.cider)},"
                f"{fmt(s.spice)},{fmt(s.s_m)}"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "report.csv"
        csv_path.write_text(self.to_csv_text())
        json_path = out_dir / "report.json"
        json_path.write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
        return [csv_path, json_path]


def _score_slice(
    items: Sequence[EvalItem],
    include_cider: bool,
    spice: float | None,
) -> SliceScores:
    b1, b2, b3, b4 = (bleu_n(items, k) for k in (1, 2, 3, 4))
    met = meteor_simplified(items)
    rou = rouge_l(items)
    cid = cider_d(items) if include_cider else None
    return SliceScores(
        n_items=len(items),
        bleu1=b1, bleu2=b2, bleu3=b3, bleu4=b4,
        meteor=met, rouge=rou, cider=cid, spice=spice,
        s_m=s_m_star(b4, met, rou, cid, spice),
    )


def evaluate(
    hypotheses: Mapping[str, Sequence[str] | str],
    entries: Sequence[DatasetEntry],
    spice_scores: Mapping[str, float] | None = None,
) -> MetricReport:
    """Score generated captions against a corpus slice.

    ``hypotheses`` maps entry id to a generated caption (token list or
    raw string).  Every entry must have a hypothesis; missing ids raise
    with the full list.  The report has an overall row plus change /
    no-change rows when those subsets are non-empty; CIDEr-D is omitted
    from the no-change row, and S_m* always averages the metrics present
    in its row.
    """
    if not entries:
        raise ValueError("evaluate needs at least one entry")
    missing = sorted(e.id for e in entries if e.id not in hypotheses)
    if missing:
        raise ValueError(f"missing hypotheses for {len(missing)} entries: {missing}")

    def tokens_of(value: Sequence[str] | str) -> list[str]:
        return tokenize(value) if isinstance(value, str) else list(value)

    items: dict[str, EvalItem] = {}
    for entry in entries:
        items[entry.id] = EvalItem(
            hypothesis=tokens_of(hypotheses[entry.id]),
            references=entry.captions,
            is_change=entry.is_change,
        )

    def spice_for(ids: Iterable[str]) -> float | None:
        if spice_scores is None:
            return None
        ids = list(ids)
        vals = [spice_scores[i] for i in ids if i in spice_scores]
        if len(vals) != len(ids):
            raise ValueError("spice_scores must cover every evaluated entry")
        return sum(vals) / len(vals)

    notes = [METEOR_NOTE, "CIDEr-D is omitted for the no_change slice"]
    if spice_scores is None:
        notes.append(
            "SPICE unavailable: S_m* averages the available metrics in each row"
        )

    slices: dict[str, SliceScores] = {}
    all_ids = list(items)
    slices["overall"] = _score_slice(
        [items[i] for i in all_ids], True, spice_for(all_ids)
    )
    change_ids = [i for i in all_ids if items[i].is_change]
    if change_ids:
        slices["change"] = _score_slice(
            [items[i] for i in change_ids], True, spice_for(change_ids)
        )
    nc_ids = [i for i in all_ids if not items[i].is_change]
    if nc_ids:
        slices["no_change"] = _score_slice(
            [items[i] for i in nc_ids], False, spice_for(nc_ids)
        )
    return MetricReport(
        slices=slices, spice_included=spice_scores is not None, notes=notes
    )


def load_spice_scores(path: str | Path) -> dict[str, float]:
    """Read per-item SPICE scores from a JSON file: {entry_id: score}."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("SPICE file must be a JSON object of id -> score")
    return {str(k): float(v) for k, v in data.items()}
