"""
Command-line entry point: python -m sg_commonsense <command> [flags]

Primary outputs (reports, corpora, checkpoints) go to stdout or files and are
byte-identical for identical flags and inputs. Logs go to stderr. Failures
print one JSON line on stderr and exit non-zero:

    2  missing or invalid file (corpus, vocabulary, checkpoint)
    3  configuration validation failure
    4  training diverged
    1  any other error
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from loguru import logger

from sg_commonsense.baselines import build_frequency
from sg_commonsense.config import load_json
from sg_commonsense.corpus import load_world, sample_corpus, write_manifest
from sg_commonsense.errors import (
    CheckpointError,
    ConfigError,
    CorpusLoadError,
    InvalidFileError,
    SgCommonsenseError,
    TrainingDivergedError,
)
from sg_commonsense.findings import blocking
from sg_commonsense.fusion import PROVENANCE_TAGS, fuse_graphs, provenance
from sg_commonsense.glat import GlatConfig, GlatModel
from sg_commonsense.io.checkpoint import load_checkpoint
from sg_commonsense.io.corpus_jsonl import CorpusJsonlIO
from sg_commonsense.io.corpus_validator import CorpusValidator
from sg_commonsense.logging_setup import configure_logging
from sg_commonsense.metrics import masked_accuracy, report_frame, write_report
from sg_commonsense.perception_sim import NoiseConfig, simulate
from sg_commonsense.pipeline import (
    SGG_METHODS,
    EvaluationConfig,
    prediction_stats,
    run_ablation,
    run_sgg_eval,
)
from sg_commonsense.training import FineTuneConfig, TrainingConfig, fine_tune, pretrain

EXIT_OK, EXIT_ERROR, EXIT_FILE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3, 4


# -----------------------------
# Helpers
# -----------------------------

def _clean(value: Any) -> Any:
    """JSON-safe copy: NaN and inf become null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _emit(doc: Any) -> None:
    print(json.dumps(_clean(doc), sort_keys=True))


def _vocab_path(corpus: str, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    p = Path(corpus)
    return p.with_name(p.stem + ".vocab.json")


def _load_corpus(corpus: str, vocab_flag: str | None):
    io = CorpusJsonlIO()
    vocab = io.load_vocabulary(_vocab_path(corpus, vocab_flag))
    return io.load(corpus), vocab


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: experiment config must be a JSON object")
    return doc


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or any(k <= 0 for k in ks):
        raise argparse.ArgumentTypeError(f"--k values must be positive, got {text!r}")
    return ks


# -----------------------------
# Commands
# -----------------------------

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    graphs = sample_corpus(world, args.n, args.seed)
    result = CorpusValidator(world.vocab).validate_graphs(graphs)
    if not result.ok:
        row = blocking(result.findings).row(0, named=True)
        raise CorpusLoadError(f"Generated graph failed validation: {row['rule_id']} {row['message']}",
                              line=int(row["row_index"]))

    out = Path(args.out)
    io = CorpusJsonlIO(world.vocab)
    io.save(graphs, out)
    io.save_vocabulary(out.with_name(out.stem + ".vocab.json"))
    manifest = write_manifest(out.with_name(out.stem + ".manifest.json"), world=world, seed=args.seed, n=args.n)
    _emit({"out": str(out), **manifest})
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    graphs, vocab = _load_corpus(args.corpus, args.vocab)
    doc = _load_config(args.config)
    model_cfg = GlatConfig.from_dict(doc.get("model"), vocab)
    training = TrainingConfig.from_dict(doc.get("training"))
    model = GlatModel.init(model_cfg, vocab, args.seed)
    result = pretrain(graphs, model, training, seed=args.seed, out=args.out)
    _emit({"out": args.out, "best_epoch": result.checkpoint.metadata.get("epoch"),
           "history": [r.to_dict() for r in result.history]})
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    graphs = CorpusJsonlIO(ckpt.model.vocab).load(args.corpus)
    noise = NoiseConfig.from_dict(load_json(args.noise))
    doc = _load_config(args.config)
    result = fine_tune(
        ckpt.model, noise, graphs,
        FineTuneConfig.from_dict(doc.get("finetune")),
        TrainingConfig.from_dict(doc.get("training")),
        seed=args.seed, out=args.out, corrupt_entities=args.mode == "sgcls",
    )
    _emit({"out": args.out, "best_epoch": result.checkpoint.metadata.get("epoch"),
           "history": [r.to_dict() for r in result.history]})
    return EXIT_OK


def cmd_eval_mask(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    graphs = CorpusJsonlIO(ckpt.model.vocab).load(args.corpus)
    acc = masked_accuracy(ckpt.model, graphs, ckpt.model.vocab, args.rate, args.seed)
    _emit({"rate": args.rate, "seed": args.seed, **acc.as_row()})
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    graphs, vocab = _load_corpus(args.corpus, args.vocab)
    doc = _load_config(args.config)
    world = load_world(args.world) if args.world else None
    report = run_ablation(
        graphs, vocab,
        GlatConfig.from_dict(doc.get("model"), vocab),
        TrainingConfig.from_dict(doc.get("training")),
        EvaluationConfig.from_dict(doc.get("evaluation")),
        seeds=args.seeds, world=world,
    )
    if args.out:
        out = Path(args.out)
        write_report(report_frame(report["rows"]), out.with_suffix(".csv"))
        out.write_text(json.dumps(_clean(report), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_eval_sgg(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab = ckpt.model.vocab
    io = CorpusJsonlIO(vocab)
    truths = io.load(args.corpus)
    counts = build_frequency(io.load(args.train_corpus)) if args.train_corpus else None
    if counts is None:
        logger.warning("No --train-corpus given; frequency bins use the evaluated corpus")
    noise = NoiseConfig.from_dict(load_json(args.noise))
    result = run_sgg_eval(
        ckpt.model, truths, noise,
        mode=args.mode, ks=args.k, graph_constraint=args.graph_constraint,
        prune_k=args.prune_k, train_counts=counts, bin_average=args.bin_average,
    )
    if args.dump_dir:
        dump = Path(args.dump_dir)
        io.save_scored(result.perception, dump / "perception.jsonl")
        io.save_scored(result.commonsense, dump / "commonsense.jsonl")
        io.save_scored(result.fused, dump / "fused.jsonl", provenance=result.provenance)
    if args.out_dir:
        out = Path(args.out_dir)
        write_report(result.table, out / "sgg.csv")
        for method in SGG_METHODS:
            write_report(result.binned[method].to_frame(), out / f"binned_{method}.csv")
    _emit({
        "rows": result.table.to_dicts(),
        "binned": {m: {"average_recall": r.average_recall, "bins": r.to_frame().to_dicts()}
                   for m, r in result.binned.items()},
    })
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace) -> int:
    io = CorpusJsonlIO()
    io.load_vocabulary(args.vocab)
    gps = io.load_scored(args.perception)
    gcs = io.load_scored(args.commonsense)
    if len(gps) != len(gcs):
        raise CorpusLoadError(f"Stream lengths differ: {len(gps)} perception vs {len(gcs)} commonsense graphs")
    fused, tags = [], []
    for gp, gc in zip(gps, gcs):
        gf = fuse_graphs(gp, gc)
        fused.append(gf)
        tags.append(provenance(gp, gc, gf))
    io.save_scored(fused, args.out, provenance=tags)
    counts = {t: sum(row.count(t) for row in tags) for t in PROVENANCE_TAGS}
    _emit({"out": args.out, "graphs": len(fused), "provenance": counts})
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab = ckpt.model.vocab
    graphs = CorpusJsonlIO(vocab).load(args.corpus)
    if args.noise:
        noise = NoiseConfig.from_dict(load_json(args.noise))
        graphs = [simulate(g, noise, np.random.default_rng([noise.seed, i]), vocab).graph
                  for i, g in enumerate(graphs)]
    table = prediction_stats(ckpt.model, graphs, args.template, top=args.top)
    if args.out:
        write_report(table, args.out)
    _emit({"template": args.template, "rows": table.to_dicts()})
    return EXIT_OK


# -----------------------------
# Parser
# -----------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sg_commonsense", description="Scene-graph commonsense toolkit")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--json-logs", action="store_true", help="Serialize log records as JSON")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="Sample a synthetic corpus from a world config")
    p.add_argument("--world", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="Masked-node pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="Fine-tune on simulated perception output")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=["predcls", "sgcls"], default="sgcls")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-mask", help="Masked-node reconstruction accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_mask)

    p = sub.add_parser("ablate", help="GLAT vs head-composition ablations vs frequency prior")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--world", help="World config; adds exact information ceilings to the report")
    p.add_argument("--out", help="Report path (.json); rows also written as .csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval-sgg", help="Perception / commonsense / fusion recall evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--mode", choices=["predcls", "sgcls"], default="sgcls")
    p.add_argument("--k", type=_ks, default=[50, 100])
    p.add_argument("--graph-constraint", action="store_true")
    p.add_argument("--prune-k", type=int, default=100)
    p.add_argument("--train-corpus", help="Corpus whose triplet counts define the frequency bins")
    p.add_argument("--bin-average", choices=["image", "instance"], default="image")
    p.add_argument("--dump-dir", help="Write perception/commonsense/fused scored JSONL here")
    p.add_argument("--out-dir", help="Write sgg.csv and binned_<method>.csv here")
    p.set_defaults(func=cmd_eval_sgg)

    p = sub.add_parser("fuse", help="Fuse perception and commonsense scored-graph streams")
    p.add_argument("--perception", required=True)
    p.add_argument("--commonsense", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("stats", help="Top fillers for a '<s> [X] <o>' template")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--noise", help="Simulate perception before collecting statistics")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", help="Also write the table as CSV")
    p.set_defaults(func=cmd_stats)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (FileNotFoundError, InvalidFileError, CorpusLoadError, CheckpointError)):
        return EXIT_FILE
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    return EXIT_ERROR


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, json_logs=args.json_logs)
    logger.info("Running {}", args.command)
    try:
        code = args.func(args)
    except (SgCommonsenseError, FileNotFoundError, ValueError, KeyError) as exc:
        code = _exit_code(exc)
        message = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        logger.error("{} failed: {}", args.command, message)
        print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": message}), file=sys.stderr)
        return code
    logger.info("{} finished", args.command)
    return code
