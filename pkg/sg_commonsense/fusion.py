"""
Scored graphs and confidence-weighted fusion of perception and commonsense logits.

Each node of a ScoredGraph carries a logit vector over its own class family
(entity classes for entity positions, predicate classes for predicate
positions). Its confidence is the largest softmax probability. Fusion averages
the perception and commonsense logit vectors of a node, each weighted by its
own confidence. It has no trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from sg_commonsense.errors import ContractError, StructureError
from sg_commonsense.scene_graph import SceneGraph, select_predicates

PROVENANCE_TAGS = ("agreement", "perception", "commonsense", "blend")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def confidence(logits: Sequence[float] | np.ndarray) -> float:
    """Maximum softmax probability of a logit vector."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractError(f"confidence expects a non-empty vector, got shape {v.shape}")
    return float(softmax(v).max())


def fuse_logits(lp: Sequence[float] | np.ndarray, lc: Sequence[float] | np.ndarray) -> np.ndarray:
    """(q_p * lp + q_c * lc) / (q_p + q_c) with q the softmax confidence of each vector."""
    lp = np.asarray(lp, dtype=np.float64)
    lc = np.asarray(lc, dtype=np.float64)
    if lp.shape != lc.shape:
        raise ContractError(f"fuse_logits width mismatch: {lp.shape} vs {lc.shape}")
    qp, qc = confidence(lp), confidence(lc)
    return (qp * lp + qc * lc) / (qp + qc)


@dataclass(frozen=True)
class ScoredGraph:
    graph: SceneGraph
    node_logits: tuple[np.ndarray, ...]
    node_confidence: tuple[float, ...]

    def __post_init__(self):
        if len(self.node_logits) != self.graph.num_nodes or len(self.node_confidence) != self.graph.num_nodes:
            raise StructureError(
                f"ScoredGraph needs one logit vector and confidence per node "
                f"({self.graph.num_nodes}), got {len(self.node_logits)} / {len(self.node_confidence)}"
            )

    @classmethod
    def from_logits(cls, structure: SceneGraph, node_logits: Iterable[np.ndarray]) -> "ScoredGraph":
        """Classes are the argmax of each row (lowest id on ties); structure and boxes are kept."""
        logits = tuple(np.asarray(v, dtype=np.float64) for v in node_logits)
        if len(logits) != structure.num_nodes:
            raise StructureError(f"Expected {structure.num_nodes} logit vectors, got {len(logits)}")
        n_e = structure.num_entities
        classes = [int(np.argmax(v)) for v in logits]
        graph = structure.with_classes(classes[:n_e], classes[n_e:])
        return cls(graph, logits, tuple(confidence(v) for v in logits))

    @property
    def entity_logits(self) -> tuple[np.ndarray, ...]:
        return self.node_logits[: self.graph.num_entities]

    @property
    def predicate_logits(self) -> tuple[np.ndarray, ...]:
        return self.node_logits[self.graph.num_entities:]

    def classes(self) -> list[int]:
        return self.graph.entity_classes() + self.graph.predicate_classes()

    def select(self, predicate_ids: Iterable[int]) -> tuple["ScoredGraph", tuple[int, ...]]:
        keep = sorted(set(int(j) for j in predicate_ids))
        sub, entity_ids = select_predicates(self.graph, keep)
        n_e = self.graph.num_entities
        idx = list(entity_ids) + [n_e + j for j in keep]
        return (
            ScoredGraph(sub, tuple(self.node_logits[i] for i in idx), tuple(self.node_confidence[i] for i in idx)),
            entity_ids,
        )

    def with_entity_logits_from(self, other: "ScoredGraph") -> "ScoredGraph":
        """Replace entity logits with other's (PredCls keeps given entity classes)."""
        if not self.graph.same_structure(other.graph):
            raise StructureError("Cannot copy entity logits between graphs of different structure")
        n_e = self.graph.num_entities
        return ScoredGraph.from_logits(self.graph, other.node_logits[:n_e] + self.node_logits[n_e:])


def fuse_graphs(gp: ScoredGraph, gc: ScoredGraph) -> ScoredGraph:
    """Node-wise fusion; structure and boxes come from gp, edge predictions are not fused."""
    if not gp.graph.same_structure(gc.graph):
        raise StructureError(
            f"fuse_graphs needs identical structure: perception has {gp.graph.num_entities} entities / "
            f"{gp.graph.links()}, commonsense has {gc.graph.num_entities} entities / {gc.graph.links()}"
        )
    fused = [fuse_logits(a, b) for a, b in zip(gp.node_logits, gc.node_logits)]
    return ScoredGraph.from_logits(gp.graph, fused)


def provenance(gp: ScoredGraph, gc: ScoredGraph, gf: ScoredGraph) -> list[str]:
    tags = []
    for p, c, f in zip(gp.classes(), gc.classes(), gf.classes()):
        if p == c:
            tags.append("agreement")
        elif f == p:
            tags.append("perception")
        elif f == c:
            tags.append("commonsense")
        else:
            tags.append("blend")
    return tags
