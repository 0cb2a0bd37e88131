"""Frequency prior and the head-composition ablations of GLAT."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from loguru import logger

from sg_commonsense.glat import GlatConfig, GlatModel, MaskedGraph
from sg_commonsense.scene_graph import SceneGraph, Vocabulary

ABLATION_KINDS = ("global_only", "local_only", "local_fixed")

# report labels, GLAT first
METHOD_LABELS = {
    "glat": "Global-local transformer (GLAT)",
    "global_only": "Transformer (global heads only)",
    "local_only": "Graph attention (local heads only)",
    "local_fixed": "Graph convolution (fixed local attention)",
    "frequency": "Triplet frequency",
}

UNKNOWN_CLASS = -1


# -----------------------------
# Frequency prior
# -----------------------------

@dataclass
class FrequencyTable:
    counts: dict[tuple[int, int], Counter] = field(default_factory=dict)
    total_graphs: int = 0

    def count(self, subject_class: int, predicate_class: int, object_class: int) -> int:
        return self.counts.get((subject_class, object_class), Counter())[predicate_class]

    def predicate_totals(self) -> Counter:
        total: Counter = Counter()
        for c in self.counts.values():
            total.update(c)
        return total


def build_frequency(corpus: Iterable[SceneGraph]) -> FrequencyTable:
    table = FrequencyTable()
    for g in corpus:
        table.total_graphs += 1
        for p in g.predicates:
            key = (g.entities[p.subject].class_id, g.entities[p.object].class_id)
            table.counts.setdefault(key, Counter())[p.class_id] += 1
    logger.debug("Frequency table: {} graphs, {} subject/object pairs", table.total_graphs, len(table.counts))
    return table


def _argmax_lowest(counts: Counter) -> int:
    return min(counts, key=lambda p: (-counts[p], p))


def frequency_predict(t: FrequencyTable, subject_class: int, object_class: int) -> int:
    """Most frequent predicate for the pair; ties to the lowest id; unseen pairs use the global mode."""
    pair = t.counts.get((subject_class, object_class))
    if pair:
        return _argmax_lowest(pair)
    totals = t.predicate_totals()
    return _argmax_lowest(totals) if totals else 0


class FrequencyPredictor:
    """Predictor protocol over a FrequencyTable. Entity positions are not predicted (UNKNOWN_CLASS)."""

    predicts_entities = False

    def __init__(self, table: FrequencyTable):
        self.table = table

    def predict_masked(self, mg: MaskedGraph) -> list[int]:
        g = mg.base
        out = [UNKNOWN_CLASS] * g.num_entities
        for p in g.predicates:
            out.append(frequency_predict(self.table, g.entities[p.subject].class_id, g.entities[p.object].class_id))
        return out


# -----------------------------
# Architectural ablations
# -----------------------------

def ablation_config(kind: str, config: GlatConfig) -> GlatConfig:
    """Same d, L, head_dim and total head count as config; only the head composition differs."""
    total = config.total_heads
    if kind == "glat":
        return config
    if kind == "global_only":
        return config.with_heads(total, 0, 0, fixed_attention=False)
    subject = (total + 1) // 2
    if kind == "local_only":
        return config.with_heads(0, subject, total - subject, fixed_attention=False)
    if kind == "local_fixed":
        return config.with_heads(0, subject, total - subject, fixed_attention=True)
    raise ValueError(f"Unknown ablation kind {kind!r}; expected one of {('glat',) + ABLATION_KINDS}")


def make_ablation(kind: str, config: GlatConfig, vocab: Vocabulary, seed: int) -> GlatModel:
    return GlatModel.init(ablation_config(kind, config), vocab, seed)
