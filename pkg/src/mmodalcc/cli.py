"""Command-line interface.

Subcommands: train, eval, caption, augment, stats, lint, attn-export.
Exit codes: 0 success, 1 runtime failure (missing files, bad data,
divergence), 2 usage errors (argparse).  The MMODALCC_THREADS
environment variable caps torch CPU parallelism for reproducible runs.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from .augment import augment_corpus
from .dataset import (
    CorpusError,
    build_vocabulary,
    compute_stats,
    lint_captions,
    load_index,
    split_counts,
    write_stats,
)
from .metrics import evaluate, load_spice_scores
from .model import ModelConfig
from .training import (
    TrainConfig,
    TrainingDiverged,
    apply_thread_cap,
    generate_captions,
    train,
)
from .visualize import export_attention


def _load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _model_config_from_file(path: str | None, vocab_size: int) -> ModelConfig:
    if path is None:
        return ModelConfig(vocab_size=vocab_size)
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("model config file must hold a JSON object")
    data.setdefault("vocab_size", vocab_size)
    return ModelConfig.from_dict(data)


def _load_model(checkpoint_path: str):
    path = Path(checkpoint_path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    data = ckpt.load_checkpoint(path)
    return ckpt.build_model(data)


def _gather_images(args, model) -> dict[str, np.ndarray]:
    paths = {
        "rgb_before": args.before,
        "rgb_after": args.after,
        "sem_before": args.sem_before,
        "sem_after": args.sem_after,
    }
    arrays: dict[str, np.ndarray] = {}
    for m in model.config.modalities:
        roles = ("rgb_before", "rgb_after") if m == "rgb" else ("sem_before", "sem_after")
        for role in roles:
            if paths[role] is None:
                raise ValueError(
                    f"model with modalities {model.config.modalities} requires "
                    f"--{role.replace('_', '-').replace('rgb-', '')} "
                    f"({role} image)"
                )
            arrays[role] = _load_image(paths[role])
    return arrays


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    entries = load_index(args.root)
    train_config = (
        TrainConfig.from_file(args.config) if args.config else TrainConfig()
    )
    if args.seed is not None:
        train_config = TrainConfig(**{**train_config.to_dict(), "seed": args.seed})
    vocab = build_vocabulary([e for e in entries if e.split == "train"])
    model_config = _model_config_from_file(args.model_config, len(vocab))
    state = train(entries, model_config, train_config, args.out, vocab=vocab,
                  quiet=False)
    print(f"trained {state.epoch} epochs ({state.step} steps)")
    print(f"checkpoints: {state.best_path} / {state.last_path}")
    print(f"metrics: {state.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    entries = load_index(args.root)
    selected = [e for e in entries if e.split == args.split]
    if not selected:
        raise ValueError(f"no entries in split {args.split!r}")
    model, vocab = _load_model(args.checkpoint)
    if args.hypotheses:
        raw = json.loads(Path(args.hypotheses).read_text())
        if not isinstance(raw, dict):
            raise ValueError("hypotheses file must map entry id -> caption string")
        hyps = {str(k): str(v) for k, v in raw.items()}
    else:
        hyps = generate_captions(model, vocab, selected, beam_size=args.beam)
    spice = load_spice_scores(args.spice) if args.spice else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = evaluate(hyps, selected, spice_scores=spice)
    out_dir = Path(args.out)
    report.write(out_dir)
    (out_dir / "hypotheses.json").write_text(
        json.dumps({k: hyps[k] for k in sorted(hyps)}, indent=2, sort_keys=True) + "\n"
    )
    print(report.to_csv_text(), end="")
    return 0


def cmd_caption(args) -> int:
    model, vocab = _load_model(args.checkpoint)
    arrays = _gather_images(args, model)
    images = model.prepare_images(arrays)
    if args.attn:
        hyp, maps = model.generate(images, beam_size=args.beam, record=True)
    else:
        hyp = model.generate(images, beam_size=args.beam)
        maps = None
    from .training import caption_string

    caption = caption_string(vocab, hyp.generated)
    print(caption)
    if args.attn:
        if not args.out:
            raise ValueError("--attn requires --out DIR for the exported maps")
        after_images = {}
        if "rgb" in model.config.decoder_streams:
            after_images["rgb"] = arrays["rgb_after"]
        if "sem" in model.config.decoder_streams:
            after_images["sem"] = arrays["sem_after"]
        export_attention(args.out, maps, caption.split(), after_images)
        print(f"attention maps written to {args.out}")
    return 0


def cmd_attn_export(args) -> int:
    args.attn = True
    return cmd_caption(args)


def cmd_augment(args) -> int:
    entries = load_index(args.root)
    combined = augment_corpus(entries, args.seed, args.out)
    counts = split_counts(combined)
    print(
        f"augmented corpus written to {args.out}: "
        f"{counts['train']} train / {counts['val']} val / {counts['test']} test "
        f"({len(combined)} total)"
    )
    return 0


def cmd_stats(args) -> int:
    entries = load_index(args.root)
    stats = compute_stats(entries)
    written = write_stats(stats, args.out)
    counts = split_counts(entries)
    print(
        f"{len(entries)} entries "
        f"({counts['train']}/{counts['val']}/{counts['test']} train/val/test); "
        f"vocabulary {len(stats.word_frequencies)} words; "
        f"mean caption length {stats.mean_sentence_length:.2f} "
        f"(std {stats.std_sentence_length:.2f})"
    )
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_lint(args) -> int:
    entries = load_index(args.root)
    findings = lint_captions(entries)
    text = "".join(f"{f}\n" for f in findings)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"{len(findings)} findings written to {args.out}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmodalcc",
        description="Multimodal change captioning for bitemporal scene pairs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--root", required=True, help="corpus root directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--model-config", help="model config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--root", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--spice", help="optional JSON file of per-entry SPICE scores")
    p.add_argument("--hypotheses", help="score these captions (JSON id->string) "
                                        "instead of decoding")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="caption one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--before", help="RGB before image")
    p.add_argument("--after", help="RGB after image")
    p.add_argument("--sem-before", help="semantic map before")
    p.add_argument("--sem-after", help="semantic map after")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--attn", action="store_true", help="export attention maps")
    p.add_argument("--out", help="output directory for --attn")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("attn-export", help="caption one scene and export all "
                                           "attention artifacts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--before")
    p.add_argument("--after")
    p.add_argument("--sem-before")
    p.add_argument("--sem-after")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_export)

    p = sub.add_parser("augment", help="write the augmented corpus")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("stats", help="corpus statistics CSVs")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("lint", help="check captions against annotation guidelines")
    p.add_argument("--root", required=True)
    p.add_argument("--out", help="write findings here instead of stdout")
    p.set_defaults(func=cmd_lint)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    apply_thread_cap()
    try:
        return args.func(args)
    except (CorpusError, ValueError, FileNotFoundError, TrainingDiverged,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
