"""
Predicate-as-node scene graphs.

A scene graph holds entity nodes and predicate nodes. Every predicate node
links exactly one subject entity and one object entity, so several predicates
may connect the same pair. The joint node index space lists entities first,
then predicates: predicate j has joint index len(entities) + j.

Values are immutable after construction and validated eagerly; a graph that
exists is structurally valid. Class-id bounds depend on a Vocabulary and are
checked separately by validate_graph().
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Sequence

import numpy as np
import polars as pl

from sg_commonsense.errors import ContractError, StructureError
from sg_commonsense.findings import concat_findings, empty_findings, finding

if TYPE_CHECKING:
    from sg_commonsense.fusion import ScoredGraph


# -----------------------------
# Vocabulary
# -----------------------------

@dataclass(frozen=True)
class Vocabulary:
    entity_classes: tuple[str, ...]
    predicate_classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entity_classes", tuple(self.entity_classes))
        object.__setattr__(self, "predicate_classes", tuple(self.predicate_classes))
        for kind, names in (("entity", self.entity_classes), ("predicate", self.predicate_classes)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            if dupes:
                raise StructureError(f"Duplicate {kind} class names: {dupes}")
        object.__setattr__(self, "_entity_index", {n: i for i, n in enumerate(self.entity_classes)})
        object.__setattr__(self, "_predicate_index", {n: i for i, n in enumerate(self.predicate_classes)})

    @property
    def num_entities(self) -> int:
        return len(self.entity_classes)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_classes)

    @property
    def mask_token(self) -> int:
        return self.num_entities + self.num_predicates

    @property
    def size(self) -> int:
        """Width of the joint one-hot space, MASK slot included."""
        return self.num_entities + self.num_predicates + 1

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except KeyError:
            raise KeyError(f"Unknown entity class: {name!r}") from None

    def predicate_id(self, name: str) -> int:
        try:
            return self._predicate_index[name]
        except KeyError:
            raise KeyError(f"Unknown predicate class: {name!r}") from None

    def has_entity(self, name: str) -> bool:
        return name in self._entity_index

    def has_predicate(self, name: str) -> bool:
        return name in self._predicate_index

    def token_of_entity(self, class_id: int) -> int:
        return class_id

    def token_of_predicate(self, class_id: int) -> int:
        return self.num_entities + class_id

    def to_dict(self) -> dict[str, list[str]]:
        return {
            "entity_classes": list(self.entity_classes),
            "predicate_classes": list(self.predicate_classes),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Vocabulary":
        return cls(tuple(doc["entity_classes"]), tuple(doc["predicate_classes"]))


# -----------------------------
# Nodes and graphs
# -----------------------------

@dataclass(frozen=True)
class EntityNode:
    class_id: int
    box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise StructureError(f"Entity class id must be non-negative, got {self.class_id}")
        if self.box is not None:
            box = tuple(float(b) for b in self.box)
            if len(box) != 4 or any(not (0.0 <= b <= 1.0) for b in box):
                raise StructureError(f"Entity box must be 4 values in [0,1], got {self.box}")
            object.__setattr__(self, "box", box)


@dataclass(frozen=True)
class PredicateNode:
    class_id: int
    subject: int
    object: int

    def __post_init__(self):
        if self.class_id < 0:
            raise StructureError(f"Predicate class id must be non-negative, got {self.class_id}")
        if self.subject == self.object:
            raise StructureError(f"Predicate subject and object must differ (both {self.subject})")


@dataclass(frozen=True)
class SceneGraph:
    entities: tuple[EntityNode, ...] = ()
    predicates: tuple[PredicateNode, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        n_e = len(self.entities)
        for j, p in enumerate(self.predicates):
            for role, idx in (("subject", p.subject), ("object", p.object)):
                if not (0 <= idx < n_e):
                    raise StructureError(
                        f"Predicate {j} {role} index {idx} out of range for {n_e} entities"
                    )

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    @property
    def num_nodes(self) -> int:
        return len(self.entities) + len(self.predicates)

    def entity_classes(self) -> list[int]:
        return [e.class_id for e in self.entities]

    def predicate_classes(self) -> list[int]:
        return [p.class_id for p in self.predicates]

    def links(self) -> list[tuple[int, int]]:
        return [(p.subject, p.object) for p in self.predicates]

    def same_structure(self, other: "SceneGraph") -> bool:
        return self.num_entities == other.num_entities and self.links() == other.links()

    def with_classes(self, entity_ids: Sequence[int], predicate_ids: Sequence[int]) -> "SceneGraph":
        """Same structure (links, boxes), new class ids."""
        if len(entity_ids) != self.num_entities or len(predicate_ids) != self.num_predicates:
            raise ContractError(
                f"Class lists of length ({len(entity_ids)}, {len(predicate_ids)}) do not match "
                f"graph with ({self.num_entities}, {self.num_predicates}) nodes"
            )
        return SceneGraph(
            tuple(EntityNode(int(c), e.box) for c, e in zip(entity_ids, self.entities)),
            tuple(PredicateNode(int(c), p.subject, p.object) for c, p in zip(predicate_ids, self.predicates)),
        )


@dataclass(frozen=True)
class AdjacencyMasks:
    a_s: np.ndarray = field(repr=False)
    a_o: np.ndarray = field(repr=False)


def validate_graph(g: SceneGraph, vocab: Vocabulary, *, row_index: int = -1) -> pl.DataFrame:
    """Class-id bound checks that need a vocabulary. Returns a findings table."""
    parts: list[pl.DataFrame] = []
    for i, e in enumerate(g.entities):
        if e.class_id >= vocab.num_entities:
            parts.append(finding(
                "GRAPH", "SG_010", "HIGH", f"entities[{i}].class",
                f"Entity class id {e.class_id} out of range for {vocab.num_entities} classes.",
                row_index=row_index, evidence=str(e.class_id),
            ))
    for j, p in enumerate(g.predicates):
        if p.class_id >= vocab.num_predicates:
            parts.append(finding(
                "GRAPH", "SG_011", "HIGH", f"predicates[{j}].class",
                f"Predicate class id {p.class_id} out of range for {vocab.num_predicates} classes.",
                row_index=row_index, evidence=str(p.class_id),
            ))
    return concat_findings(parts) if parts else empty_findings()


# -----------------------------
# Operations
# -----------------------------

def from_triplets(
    triplets: Iterable[tuple[int, int | str, int]],
    entities: Sequence[EntityNode],
    vocab: Vocabulary | None = None,
) -> SceneGraph:
    """One predicate node per (subject_entity, predicate_class, object_entity), in order."""
    predicates = []
    for s, p, o in triplets:
        if isinstance(p, str):
            if vocab is None:
                raise ContractError(f"Predicate name {p!r} given without a vocabulary")
            p = vocab.predicate_id(p)
        predicates.append(PredicateNode(int(p), int(s), int(o)))
    return SceneGraph(tuple(entities), tuple(predicates))


def to_triplets(g: SceneGraph, vocab: Vocabulary | None = None) -> list[tuple]:
    """(subject_class, predicate_class, object_class) per predicate; names when vocab is given."""
    out = []
    for p in g.predicates:
        s, o = g.entities[p.subject].class_id, g.entities[p.object].class_id
        if vocab is None:
            out.append((s, p.class_id, o))
        else:
            out.append((vocab.entity_classes[s], vocab.predicate_classes[p.class_id], vocab.entity_classes[o]))
    return out


def adjacency_masks(g: SceneGraph) -> AdjacencyMasks:
    n = g.num_nodes
    n_e = g.num_entities
    a_s = np.zeros((n, n), dtype=np.float64)
    a_o = np.zeros((n, n), dtype=np.float64)
    for j, p in enumerate(g.predicates):
        node = n_e + j
        a_s[node, p.subject] = a_s[p.subject, node] = 1.0
        a_o[node, p.object] = a_o[p.object, node] = 1.0
    a_s.flags.writeable = False
    a_o.flags.writeable = False
    return AdjacencyMasks(a_s, a_o)


def select_predicates(g: SceneGraph, predicate_ids: Iterable[int]) -> tuple[SceneGraph, tuple[int, ...]]:
    """
    Induced graph on the given predicates and the entities they reference.

    Returns (graph, entity_ids) where entity_ids[i] is the original index of
    kept entity i. Relative order of both node types is preserved.
    """
    keep = sorted(set(int(j) for j in predicate_ids))
    entity_ids = tuple(sorted({idx for j in keep for idx in (g.predicates[j].subject, g.predicates[j].object)}))
    remap = {old: new for new, old in enumerate(entity_ids)}
    sub = SceneGraph(
        tuple(g.entities[i] for i in entity_ids),
        tuple(
            PredicateNode(g.predicates[j].class_id, remap[g.predicates[j].subject], remap[g.predicates[j].object])
            for j in keep
        ),
    )
    return sub, entity_ids


def top_k_predicates(confidences: Sequence[float], k: int) -> list[int]:
    """Indices of the k most confident predicates; ties go to the lower index."""
    if k < 0:
        raise ContractError(f"k must be non-negative, got {k}")
    order = sorted(range(len(confidences)), key=lambda j: (-confidences[j], j))
    return sorted(order[:k])


def prune_top_k(g: "ScoredGraph", k: int) -> SceneGraph:
    """Keep the k most confident predicates and exactly the entities they reference."""
    n_e = g.graph.num_entities
    keep = top_k_predicates(g.node_confidence[n_e:], k)
    sub, _ = select_predicates(g.graph, keep)
    return sub


def prune_scored_top_k(g: "ScoredGraph", k: int) -> tuple["ScoredGraph", tuple[int, ...], list[int]]:
    """
    Scored variant of prune_top_k.

    Returns (pruned scored graph, kept entity ids, kept predicate ids) in the
    original index space, so targets and ground truth can be aligned.
    """
    n_e = g.graph.num_entities
    keep = top_k_predicates(g.node_confidence[n_e:], k)
    pruned, entity_ids = g.select(keep)
    return pruned, entity_ids, keep
