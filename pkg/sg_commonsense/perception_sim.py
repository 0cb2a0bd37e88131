"""
Simulated perception front end.

Stands in for an image-based scene graph model: given a ground-truth graph it
returns a ScoredGraph whose node classes are corrupted at a controlled rate
and whose logits carry a temperature-controlled confidence. Structure (entity
count, predicate links, boxes) is always copied unchanged from the truth.

Logits of a node are one_hot(chosen class) / T, with T = temperature_correct
when the class was kept and temperature_wrong when it was flipped. A larger
temperature gives a flatter softmax and therefore a lower confidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from sg_commonsense.config import load_block, validate_noise_block
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.scene_graph import SceneGraph, Vocabulary


@dataclass(frozen=True)
class NoiseConfig:
    corruption_rate: float = 0.3
    # {"entity"|"predicate": {true_class_name: {wrong_class_name: prob}}}; missing rows are uniform
    confusion: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    temperature_correct: float = 0.25
    temperature_wrong: float = 2.0
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> "NoiseConfig":
        doc = load_block(doc, validate_noise_block)
        return cls(**doc)

    def to_dict(self) -> dict[str, Any]:
        return {
            "corruption_rate": self.corruption_rate,
            "confusion": self.confusion,
            "temperature_correct": self.temperature_correct,
            "temperature_wrong": self.temperature_wrong,
            "seed": self.seed,
        }


def _wrong_class_distribution(
    cfg: NoiseConfig, kind: str, true_id: int, names: tuple[str, ...]
) -> tuple[np.ndarray, np.ndarray]:
    row = cfg.confusion.get(kind, {}).get(names[true_id])
    if row is None:
        ids = np.array([c for c in range(len(names)) if c != true_id], dtype=np.int64)
        return ids, np.full(len(ids), 1.0 / len(ids))
    index = {n: i for i, n in enumerate(names)}
    unknown = [n for n in row if n not in index]
    if unknown:
        raise KeyError(f"Unknown {kind} classes in confusion row for {names[true_id]!r}: {unknown}")
    ids = np.array([index[n] for n in row], dtype=np.int64)
    probs = np.array(list(row.values()), dtype=np.float64)
    return ids, probs / probs.sum()


def _corrupt(
    classes: list[int], width: int, names: tuple[str, ...], kind: str,
    cfg: NoiseConfig, rng: np.random.Generator, enabled: bool,
) -> list[np.ndarray]:
    logits = []
    for true_id in classes:
        chosen, temperature = true_id, cfg.temperature_correct
        # two draws per node whether or not it flips
        flip, pick = rng.random() < cfg.corruption_rate, rng.random()
        if enabled and flip and width > 1:
            ids, probs = _wrong_class_distribution(cfg, kind, true_id, names)
            slot = int(np.searchsorted(np.cumsum(probs), pick, side="right"))
            chosen = int(ids[min(slot, len(ids) - 1)])
            temperature = cfg.temperature_wrong
        v = np.zeros(width, dtype=np.float64)
        v[chosen] = 1.0 / temperature
        logits.append(v)
    return logits


def simulate(
    truth: SceneGraph,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
    *,
    corrupt_entities: bool = True,
) -> ScoredGraph:
    """
    Simulated perception output for one ground-truth graph.

    corrupt_entities=False keeps every entity class (PredCls protocol). Every
    node consumes two uniform draws either way, so predicate corruption is the
    same in both protocols for a given stream.
    """
    entity_logits = _corrupt(
        truth.entity_classes(), vocab.num_entities, vocab.entity_classes,
        "entity", cfg, rng, corrupt_entities,
    )
    predicate_logits = _corrupt(
        truth.predicate_classes(), vocab.num_predicates, vocab.predicate_classes,
        "predicate", cfg, rng, True,
    )
    return ScoredGraph.from_logits(truth, entity_logits + predicate_logits)


def simulate_corpus(
    truths: list[SceneGraph], cfg: NoiseConfig, vocab: Vocabulary, *, corrupt_entities: bool = True
) -> list[ScoredGraph]:
    """One independent stream per graph: default_rng([cfg.seed, index])."""
    return [
        simulate(g, cfg, np.random.default_rng([cfg.seed, i]), vocab, corrupt_entities=corrupt_entities)
        for i, g in enumerate(truths)
    ]
