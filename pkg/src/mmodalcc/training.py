"""Teacher-forced training with per-epoch validation decoding.

Cross-entropy over non-pad positions, Adam, uniform per-epoch caption
sampling, deterministic shuffling derived from the seed, best-checkpoint
selection by validation S_m*.  All file artifacts (metrics CSV,
checkpoints) are byte-reproducible across identical runs.
"""

from __future__ import annotations

import json
import os
import random
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .checkpoint import save_checkpoint
from .dataset import DatasetEntry, Vocabulary, build_vocabulary
from .metrics import evaluate
from .model import ChangeCaptioner, ModelConfig

METRICS_HEADER = "epoch,loss,B4,METEOR,ROUGE,CIDEr,Sm\n"

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    max_epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    use_cmca: bool = True
    use_udca: bool = True
    use_xrgb: bool = True
    use_xsem: bool = True
    precision: str = "float32"
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if not (self.use_xrgb or self.use_xsem):
            raise ValueError("at least one decoder stream (use_xrgb/use_xsem) must stay on")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive when set, got {self.grad_clip}")

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError("train config file must hold a JSON object")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "use_cmca": self.use_cmca,
            "use_udca": self.use_udca,
            "use_xrgb": self.use_xrgb,
            "use_xsem": self.use_xsem,
            "precision": self.precision,
            "grad_clip": self.grad_clip,
        }


@dataclass
class TrainState:
    model: ChangeCaptioner
    optimizer: torch.optim.Optimizer
    vocab: Vocabulary
    epoch: int = 0
    step: int = 0
    best_sm: float | None = None
    best_path: Path | None = None
    last_path: Path | None = None
    metrics_path: Path | None = None
    epoch_losses: list[float] = field(default_factory=list)


def apply_thread_cap() -> None:
    """Honor the MMODALCC_THREADS environment variable if set."""
    cap = os.environ.get("MMODALCC_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def sequence_loss(logits: Tensor, targets: Tensor, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"logits {tuple(logits.shape)} do not align with targets "
            f"{tuple(targets.shape)}"
        )
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_targets = targets.reshape(-1)
    if (flat_targets != pad_id).sum() == 0:
        raise ValueError("loss is undefined: every target position is padding")
    return F.cross_entropy(flat_logits, flat_targets, ignore_index=pad_id)


def encode_caption(
    tokens: Sequence[str], vocab: Vocabulary, t_max: int
) -> tuple[list[int], list[int]]:
    """(decoder input, target) id sequences for one caption.

    Input is [start] + tokens; target is tokens + [end].  Captions
    longer than t_max - 1 are truncated so the end token always fits.
    """
    ids = vocab.encode(tokens)[: t_max - 1]
    return [Vocabulary.START] + ids, ids + [Vocabulary.END]


def collate_batch(
    captions: Sequence[Sequence[str]], vocab: Vocabulary, t_max: int
) -> tuple[Tensor, Tensor]:
    """Right-pad a batch of captions into input/target id tensors."""
    pairs = [encode_caption(c, vocab, t_max) for c in captions]
    width = max(len(p[0]) for p in pairs)
    inputs = torch.full((len(pairs), width), Vocabulary.PAD, dtype=torch.long)
    targets = torch.full((len(pairs), width), Vocabulary.PAD, dtype=torch.long)
    for i, (inp, tgt) in enumerate(pairs):
        inputs[i, : len(inp)] = torch.tensor(inp, dtype=torch.long)
        targets[i, : len(tgt)] = torch.tensor(tgt, dtype=torch.long)
    return inputs, targets


def caption_string(vocab: Vocabulary, token_ids: Sequence[int]) -> str:
    """Decode generated ids to a caption, dropping specials."""
    words = []
    for tid in token_ids:
        if tid == Vocabulary.END:
            break
        if tid in (Vocabulary.START, Vocabulary.PAD):
            continue
        words.append(vocab.id_to_token[tid])
    return " ".join(words)


def generate_captions(
    model: ChangeCaptioner,
    vocab: Vocabulary,
    entries: Sequence[DatasetEntry],
    beam_size: int = 4,
    image_cache: dict | None = None,
) -> dict[str, str]:
    """Decode one caption per entry; returns {entry_id: caption}."""
    model.eval()
    out: dict[str, str] = {}
    for entry in entries:
        if image_cache is not None and entry.id in image_cache:
            images = image_cache[entry.id]
        else:
            images = model.prepare_images(entry.load_images())
            if image_cache is not None:
                image_cache[entry.id] = images
        hyp = model.generate(images, beam_size=beam_size)
        out[entry.id] = caption_string(vocab, hyp.generated)
    return out


def _epoch_rng(seed: int, epoch: int) -> random.Random:
    # String seeding is stable across processes and platforms.
    return random.Random(f"{seed}:{epoch}")


def train(
    entries: Sequence[DatasetEntry],
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    vocab: Vocabulary | None = None,
    quiet: bool = True,
) -> TrainState:
    """Run the training loop and write checkpoints + metrics CSV.

    The ablation toggles on ``train_config`` override the corresponding
    fields of ``model_config``.  Validation entries are decoded greedily
    after every epoch; the best checkpoint (by validation S_m*) and the
    final state are saved under ``out_dir``.
    """
    apply_thread_cap()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_entries = [e for e in entries if e.split == "train"]
    val_entries = [e for e in entries if e.split == "val"]
    if not train_entries:
        raise ValueError("no train-split entries to train on")
    if vocab is None:
        vocab = build_vocabulary(train_entries)

    model_config = replace(
        model_config,
        vocab_size=len(vocab),
        use_cmca=train_config.use_cmca,
        use_udca=train_config.use_udca,
        use_xrgb=train_config.use_xrgb and "rgb" in model_config.modalities,
        use_xsem=train_config.use_xsem and "sem" in model_config.modalities,
    )

    torch.manual_seed(train_config.seed)
    model = ChangeCaptioner(model_config)
    if train_config.precision == "float64":
        model.double()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )

    # Preload and preprocess all images once (desk-scale corpora).
    cache = {
        e.id: model.prepare_images(e.load_images())
        for e in train_entries + val_entries
    }

    state = TrainState(model=model, optimizer=optimizer, vocab=vocab)
    state.metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    csv_lines = [METRICS_HEADER]

    for epoch in range(1, train_config.max_epochs + 1):
        rng = _epoch_rng(train_config.seed, epoch)
        order = list(range(len(train_entries)))
        rng.shuffle(order)
        chosen = {
            train_entries[i].id: rng.randrange(len(train_entries[i].sentences))
            for i in order
        }

        model.train()
        total_nll = 0.0
        total_tokens = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [train_entries[i] for i in order[start : start + train_config.batch_size]]
            captions = [e.captions[chosen[e.id]] for e in batch]
            inputs, targets = collate_batch(captions, vocab, model_config.t_max)
            images = {
                role: torch.stack([cache[e.id][role] for e in batch])
                for role in cache[batch[0].id]
            }
            logits = model(images, inputs)
            loss = sequence_loss(logits, targets, Vocabulary.PAD)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {state.step + 1} "
                    f"(lr={train_config.learning_rate}); inspect gradients or "
                    "lower the learning rate"
                )
            optimizer.zero_grad()
            loss.backward()
            if train_config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            optimizer.step()
            state.step += 1
            n_tok = int((targets != Vocabulary.PAD).sum())
            total_nll += loss.detach().item() * n_tok
            total_tokens += n_tok

        state.epoch = epoch
        epoch_loss = total_nll / max(1, total_tokens)
        state.epoch_losses.append(epoch_loss)

        if val_entries:
            hyps = generate_captions(model, vocab, val_entries, beam_size=1,
                                     image_cache=cache)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                report = evaluate(hyps, val_entries)
            overall = report.slices["overall"]
            sm = overall.s_m
            csv_lines.append(
                f"{epoch},{epoch_loss:.6f},{overall.bleu4:.6f},{overall.meteor:.6f},"
                f"{overall.rouge:.6f},{overall.cider:.6f},{sm:.6f}\n"
            )
            if state.best_sm is None or sm > state.best_sm:
                state.best_sm = sm
                save_checkpoint(
                    best_path, model, vocab, optimizer,
                    epoch=epoch, step=state.step, best_sm=sm,
                    train_config=train_config.to_dict(),
                )
                state.best_path = best_path
        else:
            csv_lines.append(f"{epoch},{epoch_loss:.6f},,,,,\n")
        if not quiet:
            print(f"epoch {epoch}: loss {epoch_loss:.4f}")

    save_checkpoint(
        last_path, model, vocab, optimizer,
        epoch=state.epoch, step=state.step, best_sm=state.best_sm,
        train_config=train_config.to_dict(),
    )
    state.last_path = last_path
    if state.best_path is None:
        # No validation split: the final state doubles as the best one.
        save_checkpoint(
            best_path, model, vocab, optimizer,
            epoch=state.epoch, step=state.step, best_sm=None,
            train_config=train_config.to_dict(),
        )
        state.best_path = best_path
    state.metrics_path.write_text("".join(csv_lines))
    return state
