"""Command-line entry point: ``dimbert <command> [options]``.

Every command reads an optional flat ``key = value`` config file.  Keys
named like ``RunConfig`` fields configure training; keys prefixed with
``world.`` configure the scene generator.  Artifacts go to ``--run-dir``.
Failures print one JSON line ``{"error": ..., "reason": ...}`` to stderr and
exit with status 2.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

from . import tensor as T
from .decoding import GenerationConfig
from .errors import ConfigError, ContractError, FingerprintError, LengthError, VocabularyError
from .evaluation import dump_attention, evaluate_model, run_ablation, sweep_concepts, sweep_tsv
from .metrics import generate_captions
from .objectives import TaskKind
from .trainer import (
    Checkpoint,
    RunConfig,
    RunLog,
    TrainingDiverged,
    average_checkpoints,
    finetune_caption,
    finetune_referring,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .transformer import DiMBERT
from .world import (
    WorldConfig,
    balance_referring,
    default_vocabulary,
    generate_corpus,
    read_corpus,
    referring_items,
    write_corpus,
)

WORLD_PREFIX = "world."
EXIT_ERROR = 2


class CommandError(Exception):
    """A user-facing failure reported as a single machine-readable line."""


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def parse_config(text: str) -> tuple[RunConfig, WorldConfig]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(" ".join(str(exc).split())) from None
    values = dict(parser["run"])
    world_values = {k[len(WORLD_PREFIX):]: v for k, v in values.items() if k.startswith(WORLD_PREFIX)}
    run_values = {k: v for k, v in values.items() if not k.startswith(WORLD_PREFIX)}
    run = RunConfig.from_mapping(run_values)
    world = _world_from_mapping(world_values)
    run.model_config(default_vocabulary(), world)
    return run, world


def _world_from_mapping(values: dict) -> WorldConfig:
    fields = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(f"unknown world keys: {sorted(unknown)}")
    default = WorldConfig()
    typed = {}
    for key, raw in values.items():
        kind = type(getattr(default, key))
        raw = raw.strip()
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"world.{key}: expected a boolean, got {raw!r}")
            typed[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            typed[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"world.{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return WorldConfig(**typed).validate()


def load_config(path: str | None) -> tuple[RunConfig, WorldConfig]:
    if path is None:
        return RunConfig(), WorldConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(p.read_text(encoding="utf-8"))


def config_text(run: RunConfig, world: WorldConfig) -> str:
    lines = run.to_text()
    lines += "".join(f"{WORLD_PREFIX}{k} = {v}\n" for k, v in dataclasses.asdict(world).items())
    return lines


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _existing(path: str | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise CommandError(f"{what} {path} does not exist")
    return Path(path)


def _corpus(path: str | None, what: str = "corpus"):
    return read_corpus(_existing(path, what))[1]


def _checkpoint(path: str | None) -> Checkpoint:
    return load_checkpoint(_existing(path, "checkpoint"))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _prepare(args) -> tuple[RunConfig, WorldConfig, Path]:
    run, world = load_config(args.config)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    T.set_precision(run.precision)
    (run_dir / "config.txt").write_text(config_text(run, world), encoding="utf-8")
    return run, world, run_dir


def _save_series(result, run_dir: Path, name: str, last_k: int) -> Checkpoint:
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for i, ckpt in enumerate(result.checkpoints):
        save_checkpoint(ckpt, ckpt_dir / f"{name}-{i:03d}.ckpt")
    final = average_checkpoints(result.checkpoints, last_k)
    save_checkpoint(final, run_dir / f"{name}.ckpt")
    return final


def _model(run: RunConfig, world: WorldConfig, init: str | None) -> DiMBERT:
    vocab = default_vocabulary()
    model = DiMBERT(run.model_config(vocab, world), vocab, seed=run.seed)
    if init is not None:
        _checkpoint(init).load_into(model)
    return model


def cmd_generate_corpus(args) -> dict:
    run, world, run_dir = _prepare(args)
    seed = run.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else run_dir / "corpus.jsonl"
    examples = generate_corpus(args.n, seed, world)
    write_corpus(out, examples, world, seed)
    return {"corpus": str(out), "examples": len(examples), "referring": len(referring_items(examples))}


def cmd_pretrain(args) -> dict:
    run, world, run_dir = _prepare(args)
    corpus = _corpus(args.corpus)
    model = _model(run, world, args.init)
    log = RunLog(run_dir / "train_log.tsv")
    result = pretrain(model, corpus, run, log)
    final = _save_series(result, run_dir, "pretrain", run.average_last)
    out = {"checkpoint": str(run_dir / "pretrain.ckpt"), "epochs": len(result.checkpoints),
           "task_counts": result.task_counts}
    if run.domain_adapt and args.domain_corpus:
        final.load_into(model)
        domain = pretrain(model, _corpus(args.domain_corpus, "domain corpus"), run, log, phase="domain")
        _save_series(domain, run_dir, "domain", run.average_last)
        out["checkpoint"] = str(run_dir / "domain.ckpt")
        out["domain_task_counts"] = domain.task_counts
    return out


def cmd_finetune(args) -> dict:
    run, world, run_dir = _prepare(args)
    corpus = _corpus(args.corpus)
    model = _model(run, world, None)
    init = _checkpoint(args.init) if args.init else None
    log = RunLog(run_dir / "train_log.tsv")
    if args.task == "caption":
        result = finetune_caption(model, corpus, run, init, log)
    else:
        pairs = referring_items(corpus)
        if not pairs:
            raise CommandError("corpus has no referring tasks")
        if args.max_tasks is not None:
            if not 0.0 <= args.attribute_share <= 1.0:
                raise CommandError(f"--attribute-share must lie in [0, 1], got {args.attribute_share}")
            pairs = balance_referring(pairs, args.max_tasks, args.attribute_share)
        result = finetune_referring(model, pairs, run, init, log)
    _save_series(result, run_dir, args.task, run.average_last)
    return {"checkpoint": str(run_dir / f"{args.task}.ckpt"), "epochs": len(result.checkpoints)}


def cmd_generate(args) -> dict:
    run, world, run_dir = _prepare(args)
    model = _checkpoint(args.checkpoint).build_model()
    corpus = _corpus(args.corpus)
    gen = GenerationConfig(args.beam_size or run.beam_size, run.max_length)
    captions = generate_captions(model, corpus, run.n_concepts, gen)
    out = Path(args.out) if args.out else run_dir / "captions.tsv"
    lines = ["index\tgenerated\treference"]
    lines += [f"{i}\t{' '.join(c)}\t{' '.join(ex.caption)}" for i, (c, ex) in enumerate(zip(captions, corpus))]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"captions": str(out), "count": len(captions)}


def cmd_evaluate(args) -> dict:
    run, world, run_dir = _prepare(args)
    ckpt = _checkpoint(args.checkpoint)
    model = ckpt.build_model()
    corpus = _corpus(args.corpus)
    captions = corpus if args.task in ("caption", "both") else []
    referring = referring_items(corpus) if args.task in ("referring", "both") else []
    references = terminated = None
    if args.self_references and captions:
        # the model's own greedy outputs serve as teacher references
        references, hyps = generate_captions(model, captions, run.n_concepts, GenerationConfig(1, run.max_length),
                                             with_hypotheses=True)
        terminated = [h.finished for h in hyps]
    report = evaluate_model(model, run, captions, referring, fingerprint=ckpt.fingerprint, seeds=[run.seed],
                            teacher_references=references, teacher_terminated=terminated)
    out = Path(args.out) if args.out else run_dir / "report.tsv"
    out.write_text(report.to_text(), encoding="utf-8")
    return {"report": str(out), **report.metrics()}


def cmd_ablate(args) -> dict:
    run, world, run_dir = _prepare(args)
    seeds = _int_list(args.seeds)
    if not seeds:
        raise ConfigError("ablate needs at least one seed")
    train = _corpus(args.corpus) if args.corpus else generate_corpus(args.n_train, run.seed, world)
    test = _corpus(args.test_corpus, "test corpus") if args.test_corpus else generate_corpus(args.n_test, run.seed + 1,
                                                                                               world)
    train_ref = referring_items(train) if args.referring else ()
    test_ref = referring_items(test) if args.referring else ()

    def progress(cell):
        if args.verbose:
            print(f"done {cell.label}", file=sys.stderr)

    grid = run_ablation(run, world, train, test, seeds, train_ref, test_ref, progress)
    (run_dir / "ablation.tsv").write_text(grid.summary_tsv(), encoding="utf-8")
    (run_dir / "ablation_deltas.tsv").write_text(grid.deltas_tsv(), encoding="utf-8")
    cells_dir = run_dir / "cells"
    cells_dir.mkdir(exist_ok=True)
    for cell, reports in grid.reports.items():
        for seed, report in zip(seeds, reports):
            name = cell.label.replace("/", "_")
            (cells_dir / f"{name}_seed{seed}.tsv").write_text(report.to_text(), encoding="utf-8")
    return {"ablation": str(run_dir / "ablation.tsv"), "deltas": str(run_dir / "ablation_deltas.tsv"),
            "cells": len(grid.reports), "seeds": seeds}


def cmd_sweep_concepts(args) -> dict:
    run, world, run_dir = _prepare(args)
    ms = _int_list(args.m)
    if any(m < 0 for m in ms):
        raise ConfigError("M values must be non-negative")
    seed = run.seed if args.seed is None else args.seed
    rows = sweep_concepts(ms, args.n, seed, world)
    out = run_dir / "sweep_concepts.tsv"
    out.write_text(sweep_tsv(rows, seed), encoding="utf-8")
    return {"sweep": str(out), "f1": {r["M"]: round(r["f1"], 6) for r in rows}}


def cmd_dump_attention(args) -> dict:
    run, world, run_dir = _prepare(args)
    model = _checkpoint(args.checkpoint).build_model()
    corpus = _corpus(args.corpus)
    if not 0 <= args.index < len(corpus):
        raise CommandError(f"index {args.index} outside corpus of {len(corpus)} examples")
    ex = corpus[args.index]
    concepts = ex.concepts.words[:run.n_concepts]
    if args.source == "referring":
        if not ex.referring:
            raise CommandError(f"example {args.index} has no referring task")
        sentence = list(ex.referring[0].query)
    else:
        sentence = list(ex.caption)
    dump = dump_attention(model, ex.rois, concepts, sentence, TaskKind(args.mask))
    dump["example"] = args.index
    dump["source"] = args.source
    out = Path(args.out) if args.out else run_dir / "attention.json"
    out.write_text(json.dumps(dump, indent=1), encoding="utf-8")
    return {"attention": str(out)}


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimbert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--run-dir", default="run", help="directory for artifacts (default: run)")
        p.set_defaults(func=func)
        return p

    p = command("generate-corpus", cmd_generate_corpus, "write a synthetic corpus as JSON lines")
    p.add_argument("--n", type=int, default=256, help="number of scenes")
    p.add_argument("--seed", type=int, help="corpus seed (default: config seed)")
    p.add_argument("--out", help="output path (default: RUN_DIR/corpus.jsonl)")

    p = command("pretrain", cmd_pretrain, "masked-language pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain-corpus", help="second-stage corpus, used when domain_adapt is true")
    p.add_argument("--init", help="checkpoint to start from")

    p = command("finetune", cmd_finetune, "caption or referring fine-tuning")
    p.add_argument("--task", choices=("caption", "referring"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", help="pre-trained checkpoint")
    p.add_argument("--max-tasks", type=int, help="referring: train on this many tasks, balanced by query length")
    p.add_argument("--attribute-share", type=float, default=0.5,
                   help="referring: share of --max-tasks that need a size or colour word")

    p = command("generate", cmd_generate, "decode captions for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--out")

    p = command("evaluate", cmd_evaluate, "metric report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", choices=("caption", "referring", "both"), default="both")
    p.add_argument("--self-references", action="store_true",
                   help="score token accuracy against the model's own greedy captions")
    p.add_argument("--out")

    p = command("ablate", cmd_ablate, "mode x concepts x pre-training grid")
    p.add_argument("--corpus", help="training corpus (default: generated)")
    p.add_argument("--test-corpus", help="held-out corpus (default: generated)")
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-test", type=int, default=32)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--referring", action="store_true", help="also fine-tune and score referring")
    p.add_argument("--verbose", action="store_true")

    p = command("sweep-concepts", cmd_sweep_concepts, "extractor precision/recall/F1 per concept count")
    p.add_argument("--m", default="0,2,5,8", help="comma-separated concept counts")
    p.add_argument("--n", type=int, default=500, help="number of scenes")
    p.add_argument("--seed", type=int)

    p = command("dump-attention", cmd_dump_attention, "last-layer head-averaged attention as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--source", choices=("caption", "referring"), default="caption")
    p.add_argument("--mask", choices=[k.value for k in TaskKind], default=TaskKind.BLM.value)
    p.add_argument("--out")
    return parser


FAILURES = (ConfigError, CommandError, ContractError, FingerprintError, LengthError, VocabularyError,
            TrainingDiverged, OSError, json.JSONDecodeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except FAILURES as exc:
        reason = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "reason": reason}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
