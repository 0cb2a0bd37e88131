"""
Evaluation protocols.

- masked_accuracy: reconstruction accuracy at masked positions, split by node type.
- recall_at_k / mean_recall: triplet recall over the top-k predicted triplets,
  optionally under the graph constraint (one predicate per ordered entity pair).
  A prediction matches a ground-truth triplet when subject class, predicate
  class, object class and both entity indices agree; each prediction and each
  ground-truth instance is used at most once.
- binned_recall: recall split by how often each ground-truth triplet occurred in
  training, in powers-of-3 bins 1-3, 4-9, 10-27, 28-81, 82-243, 244+.
- node_accuracy: classes of a scored graph against the truth.

Images without ground-truth triplets have undefined recall (NaN) and are
skipped by every average.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import polars as pl
from loguru import logger

from sg_commonsense.baselines import FrequencyTable
from sg_commonsense.errors import ContractError
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.glat import NodePredictor, mask_nodes
from sg_commonsense.scene_graph import SceneGraph, Vocabulary

BIN_EDGES: tuple[tuple[int, int | None], ...] = ((1, 3), (4, 9), (10, 27), (28, 81), (82, 243), (244, None))

Triplet = tuple[int, int, int, int, int]  # (subject class, predicate class, object class, subject idx, object idx)


def _nanmean(values: Iterable[float]) -> float:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0 or np.isnan(arr).all():
        return math.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(np.nanmean(arr))


# -----------------------------
# Masked-node accuracy
# -----------------------------

@dataclass(frozen=True)
class MaskedAccuracy:
    entity: float | None
    predicate: float | None
    both: float | None
    entity_count: int = 0
    predicate_count: int = 0

    def as_row(self) -> dict[str, float | None]:
        return {"entity": self.entity, "predicate": self.predicate, "both": self.both}


def masked_accuracy(
    model: NodePredictor,
    corpus: Sequence[SceneGraph],
    vocab: Vocabulary,
    rate: float = 0.3,
    seed: int = 0,
) -> MaskedAccuracy:
    """
    Graph i is masked with default_rng([seed, i]), so every predictor is scored on
    the same masked positions. Predictors with predicts_entities=False report
    entity and overall accuracy as absent.
    """
    hits = {"entity": 0, "predicate": 0}
    counts = {"entity": 0, "predicate": 0}
    for i, g in enumerate(corpus):
        if g.num_nodes == 0:
            continue
        mg = mask_nodes(g, rate, np.random.default_rng([seed, i]), vocab)
        predicted = model.predict_masked(mg)
        for idx, true_class in zip(mg.masked_indices, mg.truth):
            kind = "entity" if idx < g.num_entities else "predicate"
            counts[kind] += 1
            hits[kind] += int(predicted[idx] == true_class)

    def ratio(h: int, c: int) -> float | None:
        return h / c if c else None

    if not getattr(model, "predicts_entities", True):
        return MaskedAccuracy(None, ratio(hits["predicate"], counts["predicate"]), None,
                              0, counts["predicate"])
    return MaskedAccuracy(
        entity=ratio(hits["entity"], counts["entity"]),
        predicate=ratio(hits["predicate"], counts["predicate"]),
        both=ratio(hits["entity"] + hits["predicate"], counts["entity"] + counts["predicate"]),
        entity_count=counts["entity"],
        predicate_count=counts["predicate"],
    )


# -----------------------------
# Triplet recall
# -----------------------------

def gt_triplets(gt: SceneGraph) -> list[Triplet]:
    return [
        (gt.entities[p.subject].class_id, p.class_id, gt.entities[p.object].class_id, p.subject, p.object)
        for p in gt.predicates
    ]


def ranked_triplets(
    pred: ScoredGraph,
    k: int,
    graph_constraint: bool = False,
    entity_ids: Sequence[int] | None = None,
) -> list[Triplet]:
    """Top-k predicted triplets by predicate confidence (ties to the lower predicate index)."""
    if k <= 0:
        raise ContractError(f"k must be positive, got {k}")
    g = pred.graph
    n_e = g.num_entities
    ids = list(range(n_e)) if entity_ids is None else list(entity_ids)
    if len(ids) != n_e:
        raise ContractError(f"entity_ids has {len(ids)} entries for {n_e} entities")

    scored = []
    for j, p in enumerate(g.predicates):
        triplet = (g.entities[p.subject].class_id, p.class_id, g.entities[p.object].class_id,
                   ids[p.subject], ids[p.object])
        scored.append((-pred.node_confidence[n_e + j], j, triplet))
    scored.sort(key=lambda t: (t[0], t[1]))

    if graph_constraint:
        seen: set[tuple[int, int]] = set()
        kept = []
        for item in scored:
            pair = item[2][3:]
            if pair not in seen:
                seen.add(pair)
                kept.append(item)
        scored = kept
    return [t for _, _, t in scored[:k]]


def match_triplets(
    pred: ScoredGraph,
    gt: SceneGraph,
    k: int,
    graph_constraint: bool = False,
    entity_ids: Sequence[int] | None = None,
) -> tuple[list[Triplet], list[bool]]:
    """Ground-truth triplets and whether each was recalled."""
    truth = gt_triplets(gt)
    matched = [False] * len(truth)
    for t in ranked_triplets(pred, k, graph_constraint, entity_ids):
        for i, g in enumerate(truth):
            if not matched[i] and g == t:
                matched[i] = True
                break
    return truth, matched


def recall_at_k(
    pred: ScoredGraph,
    gt: SceneGraph,
    k: int,
    graph_constraint: bool = False,
    *,
    entity_ids: Sequence[int] | None = None,
) -> float:
    truth, matched = match_triplets(pred, gt, k, graph_constraint, entity_ids)
    return sum(matched) / len(truth) if truth else math.nan


def _all_matches(preds, gts, k, graph_constraint, entity_ids_list):
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions for {len(gts)} ground-truth graphs")
    ids_list = entity_ids_list if entity_ids_list is not None else [None] * len(preds)
    return [match_triplets(p, g, k, graph_constraint, ids) for p, g, ids in zip(preds, gts, ids_list)]


def mean_recall(
    preds: Sequence[ScoredGraph],
    gts: Sequence[SceneGraph],
    k: int,
    graph_constraint: bool = False,
    *,
    entity_ids_list: Sequence[Sequence[int] | None] | None = None,
) -> float:
    """Per predicate class: recall averaged over images containing it; then averaged over classes."""
    per_class: dict[int, list[float]] = {}
    for truth, matched in _all_matches(preds, gts, k, graph_constraint, entity_ids_list):
        totals: dict[int, list[int]] = {}
        for t, m in zip(truth, matched):
            entry = totals.setdefault(t[1], [0, 0])
            entry[0] += int(m)
            entry[1] += 1
        for c, (hit, total) in totals.items():
            per_class.setdefault(c, []).append(hit / total)
    return _nanmean(_nanmean(v) for v in per_class.values())


def mean_recall_at_k(
    preds: Sequence[ScoredGraph],
    gts: Sequence[SceneGraph],
    k: int,
    graph_constraint: bool = False,
    *,
    entity_ids_list: Sequence[Sequence[int] | None] | None = None,
) -> float:
    """Image-averaged recall@k over a corpus."""
    return _nanmean(
        (sum(m) / len(t)) if t else math.nan
        for t, m in _all_matches(preds, gts, k, graph_constraint, entity_ids_list)
    )


# -----------------------------
# Frequency-binned recall
# -----------------------------

def bin_index(count: int) -> int:
    """0 for counts <= 3 (unseen triplets included), else the smallest b with count <= 3^(b+1), capped at 5."""
    if count <= 3:
        return 0
    b = 1
    while count > 3 ** (b + 1) and b < len(BIN_EDGES) - 1:
        b += 1
    return b


@dataclass(frozen=True)
class BinRow:
    bin_lo: int
    bin_hi: int | None
    instances: int
    unique_triplets: int
    pct_unique: float
    pct_instances: float
    recall: float


@dataclass(frozen=True)
class BinnedRecallReport:
    rows: tuple[BinRow, ...]
    average_recall: float
    average: str = "image"

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "bin_lo": [r.bin_lo for r in self.rows],
                "bin_hi": [r.bin_hi for r in self.rows],
                "unique_triplets": [r.unique_triplets for r in self.rows],
                "pct_unique": [r.pct_unique for r in self.rows],
                "pct_instances": [r.pct_instances for r in self.rows],
                "recall": [r.recall for r in self.rows],
            },
            schema={
                "bin_lo": pl.Int64, "bin_hi": pl.Int64, "unique_triplets": pl.Int64,
                "pct_unique": pl.Float64, "pct_instances": pl.Float64, "recall": pl.Float64,
            },
        )


def binned_recall(
    preds: Sequence[ScoredGraph],
    gts: Sequence[SceneGraph],
    train_counts: FrequencyTable,
    k: int,
    graph_constraint: bool = False,
    *,
    average: str = "image",
    entity_ids_list: Sequence[Sequence[int] | None] | None = None,
) -> BinnedRecallReport:
    if average not in ("image", "instance"):
        raise ContractError(f"average must be 'image' or 'instance', got {average!r}")
    n_bins = len(BIN_EDGES)
    instances = [0] * n_bins
    hits = [0] * n_bins
    unique: list[set] = [set() for _ in range(n_bins)]
    per_image: list[list[float]] = [[] for _ in range(n_bins)]
    unseen = 0

    for truth, matched in _all_matches(preds, gts, k, graph_constraint, entity_ids_list):
        img_hits = [0] * n_bins
        img_total = [0] * n_bins
        for t, m in zip(truth, matched):
            count = train_counts.count(t[0], t[1], t[2])
            unseen += count == 0
            b = bin_index(count)
            instances[b] += 1
            hits[b] += int(m)
            unique[b].add(t[:3])
            img_hits[b] += int(m)
            img_total[b] += 1
        for b in range(n_bins):
            if img_total[b]:
                per_image[b].append(img_hits[b] / img_total[b])

    if unseen:
        logger.warning("{} ground-truth triplets never occur in training; binned as 1-3", unseen)

    total_instances = sum(instances)
    total_unique = sum(len(u) for u in unique)
    rows = []
    for b, (lo, hi) in enumerate(BIN_EDGES):
        if average == "image":
            recall = _nanmean(per_image[b])
        else:
            recall = hits[b] / instances[b] if instances[b] else math.nan
        rows.append(BinRow(
            bin_lo=lo,
            bin_hi=hi,
            instances=instances[b],
            unique_triplets=len(unique[b]),
            pct_unique=len(unique[b]) / total_unique if total_unique else 0.0,
            pct_instances=instances[b] / total_instances if total_instances else 0.0,
            recall=recall,
        ))
    return BinnedRecallReport(tuple(rows), _nanmean(r.recall for r in rows), average)


# -----------------------------
# Node accuracy
# -----------------------------

@dataclass(frozen=True)
class NodeAccuracy:
    entity: float
    predicate: float
    overall: float
    entity_count: int
    predicate_count: int


def node_accuracy(scored: Sequence[ScoredGraph], truths: Sequence[SceneGraph]) -> NodeAccuracy:
    """Pooled class accuracy of scored graphs against truths with identical structure."""
    hit_e = hit_p = n_e = n_p = 0
    for sg, truth in zip(scored, truths):
        if not sg.graph.same_structure(truth):
            raise ContractError("node_accuracy needs predictions with the truth's structure")
        hit_e += sum(a == b for a, b in zip(sg.graph.entity_classes(), truth.entity_classes()))
        hit_p += sum(a == b for a, b in zip(sg.graph.predicate_classes(), truth.predicate_classes()))
        n_e += truth.num_entities
        n_p += truth.num_predicates
    return NodeAccuracy(
        entity=hit_e / n_e if n_e else math.nan,
        predicate=hit_p / n_p if n_p else math.nan,
        overall=(hit_e + hit_p) / (n_e + n_p) if n_e + n_p else math.nan,
        entity_count=n_e,
        predicate_count=n_p,
    )


# -----------------------------
# Reports
# -----------------------------

def report_frame(rows: Sequence[dict]) -> pl.DataFrame:
    return pl.DataFrame(list(rows))


def write_report(df: pl.DataFrame, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if p.suffix == ".json":
        df.write_json(p)
    else:
        df.write_csv(p)
    logger.info("Wrote report {} ({} rows)", p, df.height)
