"""
Experiment runners behind the CLI.

    run_sgg_eval   perception -> prune -> commonsense -> fusion, scored by R@K,
                   mR@K, frequency-binned recall and node accuracy
    run_ablation   GLAT, its three head-composition ablations and the frequency
                   prior on one train/test split, averaged over seeds
    prediction_stats
                   top fillers for a "<s> [X] <o>" template, in the input
                   graphs and in the commonsense reconstructions
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import duckdb
import numpy as np
import polars as pl
from loguru import logger

from sg_commonsense.baselines import (
    ABLATION_KINDS,
    METHOD_LABELS,
    FrequencyPredictor,
    FrequencyTable,
    build_frequency,
    make_ablation,
)
from sg_commonsense.config import load_block, validate_evaluation_block
from sg_commonsense.corpus import WorldModel, ceilings, masked_bag_ceiling
from sg_commonsense.fusion import ScoredGraph, fuse_graphs, provenance
from sg_commonsense.glat import GlatConfig, GlatModel, mask_indices, reconstruct
from sg_commonsense.metrics import (
    BinnedRecallReport,
    binned_recall,
    masked_accuracy,
    mean_recall,
    mean_recall_at_k,
    node_accuracy,
)
from sg_commonsense.perception_sim import NoiseConfig, simulate
from sg_commonsense.scene_graph import SceneGraph, Vocabulary, prune_scored_top_k, select_predicates
from sg_commonsense.training import TrainingConfig, pretrain

SGG_MODES = ("predcls", "sgcls")
SGG_METHODS = ("perception", "commonsense", "fusion")
MASK_TOKEN = "[X]"


@dataclass(frozen=True)
class EvaluationConfig:
    test_fraction: float = 0.2
    mask_rate: float = 0.3
    ks: tuple[int, ...] = (50, 100)
    graph_constraint: bool = True
    bin_average: str = "image"

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> "EvaluationConfig":
        block = load_block(doc, validate_evaluation_block)
        if "ks" in block:
            block["ks"] = tuple(block["ks"])
        return cls(**block)


def split_test(graphs: Sequence[SceneGraph], fraction: float, seed: int) -> tuple[list, list]:
    """(train, test) split from stream default_rng([seed, 4])."""
    n = len(graphs)
    n_test = min(int(math.floor(fraction * n + 0.5)), n)
    perm = np.random.default_rng([seed, 4]).permutation(n)
    test_ids = set(int(i) for i in perm[:n_test])
    return ([g for i, g in enumerate(graphs) if i not in test_ids],
            [g for i, g in enumerate(graphs) if i in test_ids])


# -----------------------------
# Scene graph generation evaluation
# -----------------------------

@dataclass
class SggEvaluation:
    table: pl.DataFrame
    binned: dict[str, BinnedRecallReport]
    perception: list[ScoredGraph] = field(default_factory=list)
    commonsense: list[ScoredGraph] = field(default_factory=list)
    fused: list[ScoredGraph] = field(default_factory=list)
    provenance: list[list[str]] = field(default_factory=list)


def run_sgg_eval(
    model: GlatModel,
    truths: Sequence[SceneGraph],
    noise: NoiseConfig,
    *,
    mode: str = "sgcls",
    ks: Sequence[int] = (50, 100),
    graph_constraint: bool = True,
    prune_k: int = 100,
    train_counts: FrequencyTable | None = None,
    bin_average: str = "image",
) -> SggEvaluation:
    """
    PredCls keeps ground-truth entity classes in every graph and scores predicates
    only; SGCls corrupts entities too. Recall is matched against the full truth
    through the pruned graph's entity index map.
    """
    if mode not in SGG_MODES:
        raise ValueError(f"mode must be one of {SGG_MODES}, got {mode!r}")
    predcls = mode == "predcls"
    vocab = model.vocab

    outputs: dict[str, list[ScoredGraph]] = {m: [] for m in SGG_METHODS}
    targets: list[SceneGraph] = []
    entity_ids_list: list[tuple[int, ...]] = []
    tags: list[list[str]] = []

    for i, truth in enumerate(truths):
        gp = simulate(truth, noise, np.random.default_rng([noise.seed, i]), vocab, corrupt_entities=not predcls)
        pruned, entity_ids, kept = prune_scored_top_k(gp, prune_k)
        gc = reconstruct(pruned.graph, model)
        if predcls:
            gc = gc.with_entity_logits_from(pruned)
        gf = fuse_graphs(pruned, gc)
        outputs["perception"].append(pruned)
        outputs["commonsense"].append(gc)
        outputs["fusion"].append(gf)
        targets.append(select_predicates(truth, kept)[0])
        entity_ids_list.append(entity_ids)
        tags.append(provenance(pruned, gc, gf))

    counts = train_counts if train_counts is not None else build_frequency(truths)
    rows = []
    binned: dict[str, BinnedRecallReport] = {}
    for method in SGG_METHODS:
        preds = outputs[method]
        acc = node_accuracy(preds, targets)
        row: dict[str, Any] = {"method": method, "mode": mode, "graph_constraint": graph_constraint}
        for k in ks:
            row[f"R@{k}"] = mean_recall_at_k(preds, truths, k, graph_constraint, entity_ids_list=entity_ids_list)
            row[f"mR@{k}"] = mean_recall(preds, truths, k, graph_constraint, entity_ids_list=entity_ids_list)
        row["entity_acc"] = None if predcls else acc.entity
        row["predicate_acc"] = acc.predicate
        row["node_acc"] = acc.predicate if predcls else acc.overall
        rows.append(row)
        binned[method] = binned_recall(preds, truths, counts, max(ks), graph_constraint,
                                       average=bin_average, entity_ids_list=entity_ids_list)
        logger.info("{} {}: {}", mode, method,
                    ", ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))

    return SggEvaluation(
        table=pl.DataFrame(rows),
        binned=binned,
        perception=outputs["perception"],
        commonsense=outputs["commonsense"],
        fused=outputs["fusion"],
        provenance=tags,
    )


# -----------------------------
# Ablation table
# -----------------------------

def run_ablation(
    corpus: Sequence[SceneGraph],
    vocab: Vocabulary,
    model_config: GlatConfig,
    training: TrainingConfig,
    evaluation: EvaluationConfig,
    *,
    seeds: int = 3,
    world: WorldModel | None = None,
    split_seed: int = 0,
) -> dict[str, Any]:
    """Masked-node accuracy per method, averaged over seeds 0..seeds-1 on one fixed test split."""
    train, test = split_test(corpus, evaluation.test_fraction, split_seed)
    logger.info("Ablation: {} train / {} test graphs, {} seeds", len(train), len(test), seeds)
    frequency = FrequencyPredictor(build_frequency(train))

    per_method: dict[str, list[dict]] = {k: [] for k in ("glat",) + ABLATION_KINDS + ("frequency",)}
    for seed in range(seeds):
        for kind in ("glat",) + ABLATION_KINDS:
            model = make_ablation(kind, model_config, vocab, seed)
            trained = pretrain(train, model, training, seed=seed).model
            acc = masked_accuracy(trained, test, vocab, evaluation.mask_rate, seed)
            per_method[kind].append(acc.as_row())
            logger.info("seed {} {}: {}", seed, kind, acc.as_row())
        per_method["frequency"].append(masked_accuracy(frequency, test, vocab, evaluation.mask_rate, seed).as_row())

    def mean(values: list[float | None]) -> float | None:
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else None

    rows = []
    for kind, runs in per_method.items():
        rows.append({
            "method": kind,
            "label": METHOD_LABELS[kind],
            "entity": mean([r["entity"] for r in runs]),
            "predicate": mean([r["predicate"] for r in runs]),
            "both": mean([r["both"] for r in runs]),
        })
    report: dict[str, Any] = {"rows": rows, "seeds": seeds, "train_graphs": len(train), "test_graphs": len(test)}
    if world is not None:
        report["ceilings"] = ceilings(world, mask_rate=evaluation.mask_rate)
        report["ceilings"]["global_test"] = float(np.mean([
            masked_bag_ceiling(world, test, evaluation.mask_rate, seed) for seed in range(seeds)
        ]))
    return report


# -----------------------------
# Prediction statistics
# -----------------------------

@dataclass(frozen=True)
class Template:
    subject: str | None
    predicate: str | None
    object: str | None

    @property
    def role(self) -> str:
        return "subject" if self.subject is None else "predicate" if self.predicate is None else "object"


def parse_template(text: str, vocab: Vocabulary) -> Template:
    parts = text.split()
    if len(parts) != 3 or parts.count(MASK_TOKEN) != 1:
        raise ValueError(f"Template must look like '<s> {MASK_TOKEN} <o>' with exactly one {MASK_TOKEN}: {text!r}")
    s, p, o = (None if x == MASK_TOKEN else x for x in parts)
    for name in (s, o):
        if name is not None and not vocab.has_entity(name):
            raise KeyError(f"Unknown entity class in template: {name!r}")
    if p is not None and not vocab.has_predicate(p):
        raise KeyError(f"Unknown predicate class in template: {p!r}")
    return Template(s, p, o)


def _template_sites(g: SceneGraph, t: Template, vocab: Vocabulary) -> list[int]:
    """Joint node index to mask for every triplet of g matching the template's fixed slots."""
    sites = []
    for j, p in enumerate(g.predicates):
        s_name = vocab.entity_classes[g.entities[p.subject].class_id]
        o_name = vocab.entity_classes[g.entities[p.object].class_id]
        p_name = vocab.predicate_classes[p.class_id]
        if (t.subject in (None, s_name)) and (t.predicate in (None, p_name)) and (t.object in (None, o_name)):
            sites.append({"subject": p.subject, "predicate": g.num_entities + j, "object": p.object}[t.role])
    return sites


def prediction_stats(
    model: GlatModel,
    graphs: Sequence[SceneGraph],
    template: str,
    *,
    top: int = 5,
) -> pl.DataFrame:
    """
    For each template match, mask the [X] node alone and reconstruct it. Returns the
    `top` most frequent fillers per source ("input", "commonsense") with shares.
    """
    vocab = model.vocab
    t = parse_template(template, vocab)
    names = vocab.entity_classes if t.role != "predicate" else vocab.predicate_classes
    records: list[tuple[str, str]] = []
    for g in graphs:
        classes = g.entity_classes() + g.predicate_classes()
        for site in _template_sites(g, t, vocab):
            predicted = model.predict_masked(mask_indices(g, [site], vocab))
            records.append(("input", names[classes[site]]))
            records.append(("commonsense", names[predicted[site]]))
    logger.info("Template {!r}: {} matches", template, len(records) // 2)

    con = duckdb.connect(":memory:")
    try:
        con.execute("CREATE TABLE fillers (source VARCHAR, filler VARCHAR)")
        if records:
            con.executemany("INSERT INTO fillers VALUES (?, ?)", records)
        rows = con.execute(
            """
            WITH counts AS (
                SELECT source, filler, COUNT(*) AS n,
                       COUNT(*) * 1.0 / SUM(COUNT(*)) OVER (PARTITION BY source) AS share
                FROM fillers
                GROUP BY source, filler
            ),
            ranked AS (
                SELECT *, ROW_NUMBER() OVER (PARTITION BY source ORDER BY n DESC, filler ASC) AS rank
                FROM counts
            )
            SELECT source, rank, filler, n, share
            FROM ranked
            WHERE rank <= ?
            ORDER BY source DESC, rank ASC
            """,
            [top],
        ).fetchall()
    finally:
        con.close()

    return pl.DataFrame(
        rows,
        schema={"source": pl.Utf8, "rank": pl.Int64, "filler": pl.Utf8, "count": pl.Int64, "share": pl.Float64},
        orient="row",
    )
