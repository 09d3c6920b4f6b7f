"""Command-line front end: synth, train, generate, analyze.

Every subcommand writes a manifest.json (config + versions + seed) next to
its outputs; given the same manifest, CSV and dataset outputs are
byte-identical across runs (the training log's seconds column measures wall
time and is the one exception). Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

from . import analysis, reporting, synthworld, trainer
from .captioner import (
    END_ID,
    ArchitectureKind,
    generate,
    load_params,
    save_params,
)

ARCH_CHOICES = tuple(k.value for k in ArchitectureKind)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundprobe",
        description="Train caption generators on a synthetic grounded dataset "
                    "and measure how much visual information they use per word.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic grounded dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with the full dataset config "
                                    "(overrides the individual flags)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--dim", type=int, default=64, help="feature vector width D")
    p.add_argument("--noise-std", type=float, default=1.0)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--short-fraction", type=float, default=0.2)

    p = sub.add_parser("train", help="train one architecture on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--arch", required=True, choices=ARCH_CHOICES)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from (same arch)")
    p.add_argument("--m", type=int, default=64, help="embedding size")
    p.add_argument("--h", type=int, default=64, help="hidden size")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-norm", type=float, default=5.0)

    p = sub.add_parser("generate", help="greedy-decode captions for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output JSONL file")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--max-len", type=int, default=20)

    p = sub.add_parser("analyze", help="sensitivity + omission analysis of "
                                       "generated captions")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="repeatable; one per captions file")
    p.add_argument("--captions", action="append", required=True,
                   help="generated-captions JSONL, aligned with --checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--foil", choices=("farthest", "self"), default="farthest")
    p.add_argument("--limit", type=int, help="analyze only the first N captions")
    p.add_argument("--length", type=int,
                   help="caption length for the SVG curves (default: most common)")
    p.add_argument("--svg", action="store_true", help="emit per-metric SVG charts")

    return parser


# --- dataset directory layout ---------------------------------------------------

_SPLIT_FILES = {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}


def _write_dataset_dir(out: Path, dataset: synthworld.SynthDataset):
    out.mkdir(parents=True, exist_ok=True)
    for split, fname in _SPLIT_FILES.items():
        synthworld.write_dataset(out / fname, dataset.split(split))
    dataset.vocab.to_file(out / "vocab.json")


def _read_split(data_dir: Path, split: str) -> list[synthworld.GroundedExample]:
    path = data_dir / _SPLIT_FILES[split]
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    return synthworld.read_dataset(path)


def _read_vocab(data_dir: Path) -> synthworld.Vocabulary:
    path = data_dir / "vocab.json"
    if not path.exists():
        raise FileNotFoundError(f"missing vocabulary file {path}")
    return synthworld.Vocabulary.from_file(path)


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = synthworld.SynthConfig(**json.load(fh))
    else:
        config = synthworld.SynthConfig(
            n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
            D=args.dim, noise_std=args.noise_std, seed=args.seed,
            min_count=args.min_count, short_fraction=args.short_fraction,
        )
    dataset = synthworld.generate_dataset(config)
    out = Path(args.out)
    _write_dataset_dir(out, dataset)
    reporting.write_manifest(out, "synth", config.to_dict(), config.seed)
    print(f"wrote {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} "
          f"examples (vocabulary {len(dataset.vocab)}) to {out}")
    return 0


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_set = _read_split(data_dir, "train")
    val_set = _read_split(data_dir, "val")
    vocab = _read_vocab(data_dir)
    kind = ArchitectureKind.from_tag(args.arch)
    hyper = trainer.Hyperparams(
        m=args.m, h=args.h, learning_rate=args.lr, max_epochs=args.max_epochs,
        patience=args.patience, seed=args.seed, clip_norm=args.clip_norm,
    )
    initial = None
    if args.resume:
        initial = load_params(args.resume)
        if initial.kind is not kind:
            raise ValueError(f"cannot resume: checkpoint is {initial.kind.tag!r}, "
                             f"requested {kind.tag!r}")
    result = trainer.train(kind, train_set, val_set, vocab, hyper,
                           initial_params=initial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(result.params, out / "model.gprb")
    reporting.write_training_log_csv(out / "log.csv", result.log)
    config = {"arch": kind.tag, "data": str(data_dir), "resume": args.resume,
              **hyper.to_dict()}
    reporting.write_manifest(out, "train", config, hyper.seed)
    best = result.log[result.best_epoch]
    print(f"trained {kind.tag}: {len(result.log)} epochs, best epoch "
          f"{result.best_epoch} (val loss {best.val_loss:.4f}); wrote {out}")
    return 0


def cmd_generate(args) -> int:
    params = load_params(args.checkpoint)
    examples = _read_split(Path(args.data), args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ended = 0
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            tokens = generate(params.kind, params, ex.features, args.max_len)
            ended += tokens[-1] == END_ID
            fh.write(json.dumps({"id": ex.id, "image_id": ex.id,
                                 "tokens": tokens},
                                separators=(",", ":")) + "\n")
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data),
              "split": args.split, "max_len": args.max_len, "arch": params.kind.tag}
    reporting.write_manifest(out.parent, "generate", config, None)
    print(f"generated {len(examples)} captions ({ended} reached END) to {out}")
    return 0


def _read_captions(path) -> list[analysis.CaptionSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                samples.append(analysis.CaptionSample(
                    id=int(row["id"]), image_id=int(row["image_id"]),
                    tokens=tuple(int(t) for t in row["tokens"])))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise synthworld.DatasetError(
                    f"{path}:{lineno}: malformed caption ({exc})", line=lineno) from exc
    return samples


def _dominant_length(records) -> int:
    lengths = analysis.caption_lengths(records)
    counts = Counter(lengths.values())
    # most common; ties toward the longer caption
    return max(counts, key=lambda L: (counts[L], L))


def _analyze_one(kind, params, samples, features, foil_mode, out_dir, vocab, grammar):
    foil_map = analysis.build_foil_map(features, mode=foil_mode)
    sens = analysis.sensitivity_analysis(kind, params, samples, features)
    omis = analysis.omission_scoring(kind, params, samples, features, foil_map)
    out_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_sensitivity_csv(out_dir / "sensitivity.csv", sens)
    reporting.write_omission_csv(out_dir / "omission.csv", omis)

    all_records = [*sens, *omis]
    lengths = sorted(set(analysis.caption_lengths(all_records).values()))
    for L in lengths:
        curves = []
        for metric in analysis.SENSITIVITY_METRICS:
            curves.append(analysis.aggregate(sens, L, metric))
        for metric in analysis.OMISSION_METRICS:
            curves.append(analysis.aggregate(omis, L, metric))
        reporting.write_curves_csv(out_dir / f"curves_L{L}.csv", curves)

    class_seqs = []
    unknown = 0
    for sample in samples:
        classes, n_unk = synthworld.classes_for_tokens(sample.tokens, vocab, grammar)
        class_seqs.append(classes)
        unknown += n_unk
    table = analysis.word_class_table(class_seqs)
    reporting.write_classes_csv(out_dir / "classes.csv", table)
    if unknown:
        print(f"warning: {unknown} generated tokens fell outside the grammar "
              f"(tagged UNK)", file=sys.stderr)
    return sens, omis, lengths


def cmd_analyze(args) -> int:
    if len(args.checkpoint) != len(args.captions):
        raise ValueError(f"{len(args.checkpoint)} checkpoints but "
                         f"{len(args.captions)} caption files")
    data_dir = Path(args.data)
    examples = _read_split(data_dir, args.split)
    vocab = _read_vocab(data_dir)
    grammar = synthworld.DEFAULT_GRAMMAR
    features = {ex.id: ex.features for ex in examples}
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)

    multi = len(args.checkpoint) > 1
    per_arch = {}
    for ckpt, cap_path in zip(args.checkpoint, args.captions):
        params = load_params(ckpt)
        kind = params.kind
        samples = _read_captions(cap_path)
        complete = [s for s in samples if s.tokens and s.tokens[-1] == END_ID]
        if len(complete) < len(samples):
            print(f"warning: skipping {len(samples) - len(complete)} captions "
                  f"without END from {cap_path}", file=sys.stderr)
        if args.limit is not None:
            complete = complete[: args.limit]
        if not complete:
            raise ValueError(f"no analyzable captions in {cap_path}")
        out_dir = out_root / kind.tag if multi else out_root
        sens, omis, lengths = _analyze_one(kind, params, complete, features,
                                           args.foil, out_dir, vocab, grammar)
        per_arch[kind.tag] = (sens, omis)
        print(f"analyzed {len(complete)} captions for {kind.tag} "
              f"(lengths {lengths}) -> {out_dir}")

    if args.svg:
        all_records = [rec for sens, omis in per_arch.values() for rec in sens]
        length = args.length if args.length is not None else _dominant_length(all_records)
        metric_sources = [(m, 0) for m in analysis.SENSITIVITY_METRICS] + \
                         [(m, 1) for m in analysis.OMISSION_METRICS]
        for metric, which in metric_sources:
            series = {}
            for tag, recs in per_arch.items():
                try:
                    curve = analysis.aggregate(recs[which], length, metric)
                except analysis.AnalysisError:
                    continue
                series[tag] = [(pos, pt.mean) for pos, pt in enumerate(curve.points)
                               if pt.count > 0]
            if series:
                reporting.svg_line_chart(
                    out_root / f"{metric}.svg", series,
                    title=f"{metric} by position (length {length})",
                    x_label="position", y_label=metric)

    config = {"checkpoints": [str(c) for c in args.checkpoint],
              "captions": [str(c) for c in args.captions],
              "data": str(data_dir), "split": args.split, "foil": args.foil,
              "limit": args.limit, "length": args.length, "svg": bool(args.svg)}
    reporting.write_manifest(out_root, "analyze", config, None)
    return 0


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry():  # console-script entry point
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
