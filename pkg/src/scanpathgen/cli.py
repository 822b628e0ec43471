"""Command-line entry point for the full pipeline.

Machine-readable results go to standard output as JSON; human-readable
tables go to standard error. Exit codes: 0 success, 1 validation or usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .corpus import (
    MAX_STEPS,
    NormalizedScanpath,
    Sentence,
    cap_outlier_durations,
    denormalize,
    normalize,
    read_fixation_csv,
    read_normalized_jsonl,
    read_sentences_jsonl,
    write_normalized_jsonl,
)
from .downstream import (
    Classifier,
    ClassifierConfig,
    IntentConfig,
    ScanpathSource,
    SOURCE_VARIANTS,
    TaskData,
    TaskExample,
    TRIGGERS,
    intent_finetune,
    make_synthetic_task,
    merge_pair_embedding,
    read_task_jsonl,
    run_configuration,
    save_classifier,
    trigger_duration_mean,
)
from .embeddings import load_embedding_archive, lookup
from .errors import (
    ConfigError,
    DegenerateScanpathError,
    FormatError,
    MissingKeyError,
    ParseError,
    ShapeError,
    ToolkitError,
    TrainingDivergedError,
    ValidationError,
)
from .metrics import inter_subject, skipping_f1
from .model import (
    eos_length,
    generator_forward,
    load_discriminator,
    load_generator,
    sample_noise,
    save_generator,
)
from .seeding import mix
from .training import (
    TrainConfig,
    evaluate_checkpoint,
    generate_for_sentence,
    read_train_config,
    train,
)

SPLIT_RATIOS = (0.8, 0.1, 0.1)


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting so dispatch owns exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _table(title: str, rows: list[tuple[str, object]]) -> None:
    print(title, file=sys.stderr)
    width = max((len(k) for k, _ in rows), default=0)
    for key, value in rows:
        print(f"  {key:<{width}}  {value}", file=sys.stderr)


def _refuse_overwrite(paths: list[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise ValidationError(
            f"refusing to overwrite {', '.join(existing)} (pass --force to allow)"
        )


def _apply_threads(args) -> None:
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            raise ValidationError("--threads must be >= 1")
        torch.set_num_threads(threads)


def _load_corpus(args):
    scanpaths = read_fixation_csv(args.data)
    sentences = read_sentences_jsonl(args.sentences)
    for sp in scanpaths:
        if sp.sentence_id not in sentences:
            raise ValidationError(
                f"scanpath references unknown sentence {sp.sentence_id!r}"
            )
    capped, p99 = cap_outlier_durations(scanpaths)
    return capped, sentences, p99


# --- subcommand handlers ---


def cmd_ingest(args) -> None:
    out_dir = Path(args.out)
    part_files = {part: out_dir / f"{part}.jsonl" for part in ("train", "val", "test")}
    _refuse_overwrite(list(part_files.values()), args.force)
    capped, sentences, p99 = _load_corpus(args)
    sp = corpus_mod.split(capped, sentences, SPLIT_RATIOS, args.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for part, path in part_files.items():
        records = [
            normalize(scan, sentence, p99) for sentence, scan in sp.part(part)
        ]
        write_normalized_jsonl(path, records)
        counts[part] = len(records)
    payload = {
        "p99_duration_ms": p99,
        "scanpaths": counts,
        "sentences": len(sentences),
        "seed": args.seed,
        "out_dir": str(out_dir),
    }
    _table("ingest", [("p99 (ms)", round(p99, 3))] + list(counts.items()))
    _emit(payload)


def cmd_train(args) -> None:
    cfg = read_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out)
    _refuse_overwrite([out_dir / "history.jsonl"], args.force)
    capped, sentences, p99 = _load_corpus(args)
    embs = load_embedding_archive(args.emb)
    sp = corpus_mod.split(capped, sentences, SPLIT_RATIOS, cfg.seed)
    result = train(cfg, sp, embs, p99, out_dir=out_dir)
    for rec in result.history:
        val = rec.val
        val_s = "" if val is None else f"  val_nld={val.nld:.4f}"
        print(
            f"epoch {rec.epoch:4d}  lg={rec.lg:.4f}  disc={rec.disc_loss:.4f}{val_s}",
            file=sys.stderr,
        )
    _emit(
        {
            "epochs": len(result.history),
            "best_epoch": result.best_epoch,
            "best_val_nld": result.best_val_nld,
            "p99_duration_ms": p99,
            "out_dir": str(out_dir),
            "seed": cfg.seed,
        }
    )


def _generator_with_p99(path):
    gen, meta = load_generator(path)
    if "p99_duration_ms" not in meta:
        raise ValidationError(
            f"{path}: checkpoint lacks p99_duration_ms metadata; "
            "was it written by the training pipeline?"
        )
    return gen, float(meta["p99_duration_ms"])


def cmd_generate(args) -> None:
    out_path = Path(args.out)
    _refuse_overwrite([out_path], args.force)
    gen, p99 = _generator_with_p99(args.gen)
    sentences = read_sentences_jsonl(args.sentences)
    embs = load_embedding_archive(args.emb)
    if args.text_id is not None:
        if args.text_id not in sentences:
            raise ValidationError(f"unknown sentence id {args.text_id!r}")
        ids = [args.text_id]
    else:
        ids = sorted(sentences)
    entries = []
    for sid in ids:
        sentence = sentences[sid]
        emb = lookup(embs, sid)
        samples = []
        for k in range(args.noise_samples):
            sp = generate_for_sentence(
                gen, emb, len(sentence), p99,
                noise_seed=mix(args.seed, "generate", sid, k), tau=args.tau,
            )
            samples.append(
                [
                    {
                        "word_index": fx.word_index,
                        "position": fx.word_index / len(sentence),
                        "duration_ms": fx.duration_ms,
                    }
                    for fx in sp.fixations
                ]
            )
        entries.append(
            {
                "sentence_id": sid,
                "words": list(sentence.words),
                "n_words": len(sentence),
                "samples": samples,
            }
        )
    doc = {
        "seed": args.seed,
        "tau": args.tau,
        "p99_duration_ms": p99,
        "sentences": entries,
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _table("generate", [("sentences", len(entries)), ("samples each", args.noise_samples)])
    _emit({"out": str(out_path), "sentences": len(entries), "samples": args.noise_samples})


def _eval_part(args):
    nsps = read_normalized_jsonl(args.data)
    if not nsps:
        raise ValidationError(f"{args.data}: no scanpath records")
    p99s = {nsp.p99_duration_ms for nsp in nsps}
    if len(p99s) != 1:
        raise ValidationError(f"{args.data}: inconsistent p99 values {sorted(p99s)}")
    sentences = read_sentences_jsonl(args.sentences)
    part = []
    for nsp in nsps:
        if nsp.sentence_id not in sentences:
            raise ValidationError(f"unknown sentence id {nsp.sentence_id!r}")
        sentence = sentences[nsp.sentence_id]
        if len(sentence) != nsp.sentence_len:
            raise ValidationError(
                f"sentence {nsp.sentence_id!r}: archive says {nsp.sentence_len} words, "
                f"sentences file has {len(sentence)}"
            )
        part.append((sentence, denormalize(nsp)))
    return part, sentences, p99s.pop()


def cmd_eval(args) -> None:
    gen, _ = load_generator(args.gen)
    part, sentences, p99 = _eval_part(args)
    embs = load_embedding_archive(args.emb)
    report = evaluate_checkpoint(
        gen, part, embs, args.noise_samples, p99=p99, seed=args.seed, tau=args.tau
    )
    lens = {sid: len(s) for sid, s in sentences.items()}
    gen_by_sentence = {}
    for sentence, _real in part:
        sid = sentence.sentence_id
        if sid in gen_by_sentence:
            continue
        gen_by_sentence[sid] = generate_for_sentence(
            gen, lookup(embs, sid), len(sentence), p99,
            noise_seed=mix(args.seed, "skipping", sid), tau=args.tau,
        )
    skip = skipping_f1(gen_by_sentence, [real for _, real in part], lens)
    payload = report.to_dict()
    payload["skipping_f1"] = skip
    _table(
        "eval",
        [(k, round(v, 6)) for k, v in payload.items() if isinstance(v, float)],
    )
    _emit(payload)


def cmd_intersubject(args) -> None:
    capped, sentences, p99 = _load_corpus(args)
    lens = {sid: len(s) for sid, s in sentences.items()}
    report = inter_subject(capped, lens, p99)
    payload = report.to_dict()
    payload["p99_duration_ms"] = p99
    _table(
        "inter-subject",
        [(k, round(v, 6)) for k, v in payload.items() if isinstance(v, float)],
    )
    _emit(payload)


def _task_data(args, emb_dim: int | None = None) -> tuple[TaskData, tuple[str, str] | None]:
    if args.synthetic is not None:
        if args.synthetic < 100:
            raise ValidationError("--synthetic needs at least 100 examples")
        # built-in task embeddings must match the generator width when one is in play
        kwargs = {} if emb_dim is None else {"emb_dim": emb_dim}
        data, triggers = make_synthetic_task(args.seed, n_examples=args.synthetic, **kwargs)
        return data, triggers
    if args.data is None or args.emb is None:
        raise ValidationError("need either --synthetic N or both --data and --emb")
    rows = read_task_jsonl(args.data)
    embs = load_embedding_archive(args.emb)
    steps_by_sid = {}
    if args.scanpaths is not None:
        for nsp in read_normalized_jsonl(args.scanpaths):
            steps_by_sid[nsp.sentence_id] = nsp.steps
    examples, sentences, embeddings = [], {}, {}
    for row in rows:
        sid = row["sentence_id"]
        words = tuple(str(row["text"]).split())
        if not words:
            raise ValidationError(f"task row {sid!r} has empty text")
        emb = lookup(embs, sid)
        if "pair_text" in row:
            emb = merge_pair_embedding(emb, lookup(embs, f"{sid}::pair"))
        elif emb.token_count != len(words):
            raise ValidationError(
                f"embedding for {sid!r} covers {emb.token_count} tokens but "
                f"the text has {len(words)} words"
            )
        sentences[sid] = Sentence(sid, words)
        embeddings[sid] = emb
        examples.append(TaskExample(sid, int(row["label"]), steps_by_sid.get(sid)))
    return TaskData(examples, embeddings, sentences), None


def cmd_downstream(args) -> None:
    generator = None
    needs_gen = "generated" in (args.train_src, args.test_src) or args.train_src == "real_plus_generated"
    if needs_gen:
        if args.gen is None:
            raise ValidationError(f"source {args.train_src!r}/{args.test_src!r} needs --gen")
        generator, _ = load_generator(args.gen)
    data, _ = _task_data(args, None if generator is None else generator.config.emb_dim)
    train_src = ScanpathSource(args.train_src, generator=generator, tau=args.tau)
    test_src = ScanpathSource(args.test_src, generator=generator, tau=args.tau)
    score = run_configuration(train_src, test_src, data, folds=args.folds, seed=args.seed)
    payload = {
        "train_src": args.train_src,
        "test_src": args.test_src,
        "folds": args.folds,
        "seed": args.seed,
        "weighted_f1": score,
        "scanpath_reads": data.scanpath_reads,
        "n_examples": len(data.examples),
    }
    _table("downstream", [(k, v) for k, v in payload.items()])
    _emit(payload)


def cmd_finetune_intent(args) -> None:
    out_dir = Path(args.out)
    gen_path = out_dir / "generator_intent.ckpt"
    clf_path = out_dir / "classifier_intent.ckpt"
    _refuse_overwrite([gen_path, clf_path], args.force)
    gen, meta = load_generator(args.gen)
    disc = None
    if args.disc is not None:
        disc, _ = load_discriminator(args.disc)
    data, triggers = _task_data(args, gen.config.emb_dim)
    emb_dim = next(iter(data.embeddings.values())).tokens.shape[1]
    if gen.config.emb_dim != emb_dim:
        raise ValidationError(
            f"generator expects {gen.config.emb_dim}-d embeddings, task data has {emb_dim}"
        )
    clf = Classifier(
        ClassifierConfig(emb_dim=emb_dim, hidden=8, dropout=0.1),
        init_seed=mix(args.seed, "intent-clf-init"),
    )
    before = (
        trigger_duration_mean(gen, data, triggers, seed=args.seed, tau=args.tau)
        if triggers
        else None
    )
    result = intent_finetune(
        gen, clf, data, epochs=args.epochs, lr_gen=args.lr_gen,
        cfg=IntentConfig(seed=args.seed), disc=disc,
    )
    after = (
        trigger_duration_mean(result.generator, data, triggers, seed=args.seed, tau=args.tau)
        if triggers
        else None
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_generator(gen_path, result.generator, meta=dict(meta))
    save_classifier(clf_path, result.classifier, meta={"epochs": args.epochs})
    payload = {
        "epochs": args.epochs,
        "lr_gen": args.lr_gen,
        "task_f1_history": result.history,
        "trigger_duration_before": before,
        "trigger_duration_after": after,
        "generator_out": str(gen_path),
        "classifier_out": str(clf_path),
    }
    _table(
        "finetune-intent",
        [("epochs", args.epochs)]
        + ([("trigger dur before", round(before, 4)), ("after", round(after, 4))] if triggers else []),
    )
    _emit(payload)


def cmd_export_features(args) -> None:
    out_path = Path(args.out)
    _refuse_overwrite([out_path], args.force)
    gen, p99 = _generator_with_p99(args.gen)
    sentences = read_sentences_jsonl(args.sentences)
    embs = load_embedding_archive(args.emb)
    records = []
    for sid in sorted(sentences):
        sentence = sentences[sid]
        emb = lookup(embs, sid)
        for k in range(args.noise_samples):
            noise = sample_noise(
                mix(args.seed, "export", sid, k), gen.config.max_len, gen.config.noise_dim
            )
            out = generator_forward(emb, noise, gen)
            raw = out.steps.detach().to(torch.float64).cpu().numpy()
            length = eos_length(raw[:, 2], args.tau)
            steps = np.zeros((MAX_STEPS, 3), dtype=np.float64)
            steps[:length, 0] = np.clip(raw[:length, 0], 0.0, 1.0)
            steps[:length, 1] = np.clip(raw[:length, 1], 0.0, 1.0)
            steps[length - 1, 2] = 1.0
            participant = "generated" if args.noise_samples == 1 else f"generated-{k}"
            nsp = NormalizedScanpath(
                steps=steps,
                true_length=length,
                participant_id=participant,
                sentence_id=sid,
                p99_duration_ms=p99,
                sentence_len=len(sentence),
            )
            nsp.validate()
            records.append(nsp)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_normalized_jsonl(out_path, records)
    _table("export-features", [("records", len(records)), ("out", str(out_path))])
    _emit({"out": str(out_path), "records": len(records)})


# --- parser ---


def build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(
        prog="scanpathgen",
        description="Synthesize and evaluate reading scanpaths conditioned on text.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        return p

    p = add("ingest", "normalize a fixation corpus and write split archives")
    p.add_argument("--data", required=True, help="fixation CSV")
    p.add_argument("--sentences", required=True, help="sentences JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = add("train", "train the generator/discriminator pair")
    p.add_argument("--data", required=True, help="fixation CSV")
    p.add_argument("--sentences", required=True, help="sentences JSONL")
    p.add_argument("--emb", required=True, help="embedding archive")
    p.add_argument("--config", help="flat key=value training config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")

    p = add("generate", "write plot-ready generated scanpaths as JSON")
    p.add_argument("--gen", required=True, help="generator checkpoint")
    p.add_argument("--sentences", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True, help="output JSON file")
    p.add_argument("--text-id", default=None, help="restrict to one sentence id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--noise-samples", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")

    p = add("eval", "score a generator against a normalized scanpath archive")
    p.add_argument("--gen", required=True)
    p.add_argument("--data", required=True, help="normalized scanpath JSONL")
    p.add_argument("--sentences", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--noise-samples", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)

    p = add("intersubject", "human agreement topline over a fixation corpus")
    p.add_argument("--data", required=True, help="fixation CSV")
    p.add_argument("--sentences", required=True)

    p = add("downstream", "one cell of the scanpath-source configuration matrix")
    p.add_argument("--synthetic", type=int, default=None, help="use the built-in parity task with N examples")
    p.add_argument("--data", default=None, help="task JSONL")
    p.add_argument("--emb", default=None, help="embedding archive")
    p.add_argument("--scanpaths", default=None, help="normalized real scanpaths JSONL")
    p.add_argument("--gen", default=None, help="generator checkpoint for generated sources")
    p.add_argument("--train-src", choices=SOURCE_VARIANTS, default="none")
    p.add_argument("--test-src", choices=[v for v in SOURCE_VARIANTS if v != "real_plus_generated"], default="none")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=None)

    p = add("finetune-intent", "jointly finetune generator and task classifier")
    p.add_argument("--gen", required=True)
    p.add_argument("--disc", default=None, help="optional discriminator checkpoint")
    p.add_argument("--synthetic", type=int, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--emb", default=None)
    p.add_argument("--scanpaths", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr-gen", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")

    p = add("export-features", "write generated scanpaths as a normalized archive")
    p.add_argument("--gen", required=True)
    p.add_argument("--sentences", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--noise-samples", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true")

    return parser


HANDLERS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "intersubject": cmd_intersubject,
    "downstream": cmd_downstream,
    "finetune-intent": cmd_finetune_intent,
    "export-features": cmd_export_features,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help paths
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _apply_threads(args)
        HANDLERS[args.command](args)
        return 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return 2
    except (
        ValidationError,
        ConfigError,
        ParseError,
        FormatError,
        ShapeError,
        MissingKeyError,
        DegenerateScanpathError,
        FileNotFoundError,
        IsADirectoryError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - safety net
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
