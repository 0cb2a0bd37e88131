"""
Rule-driven synthetic scene-graph corpus.

A world model declares which predicates each (subject class, object class)
pair takes, how often each pair occurs, and which scene "triggers" (isolated
scenery entities such as a mountain or a kitchen) override a pair's predicate
distribution when present anywhere in the graph. Because every graph is drawn
from these declared distributions, the Bayes-optimal masked-predicate accuracy
of predictors restricted to different evidence is known. full and local are
enumerated exactly; global is bounded on seeded masks of sampled graphs:

  full    sees the predicate's subject/object classes and the trigger set
  local   sees only the subject/object classes (immediate neighbors)
  global  sees only the bag of visible classes: it cannot tell masked nodes
          apart, so one class answers every masked predicate of a graph

Sampling per graph:
  1. each scenery trigger enters independently with its inclusion probability,
     as an entity no predicate links to;
  2. the predicate count is uniform on sizes.predicates;
  3. each predicate draws a rule pair by weight, reuses an existing entity of
     the needed class with probability reuse_prob, and draws its class from
     the first context rule whose trigger is present, else the base rule;
  4. filler entities top the graph up to min_entities plus a uniform extra.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from loguru import logger

from sg_commonsense.config import load_block, load_json, validate_world_block
from sg_commonsense.errors import WorldNotEnumerableError
from sg_commonsense.glat import mask_nodes
from sg_commonsense.io.corpus_jsonl import CorpusJsonlIO
from sg_commonsense.scene_graph import EntityNode, PredicateNode, SceneGraph, Vocabulary

MAX_ENUMERABLE_TRIGGERS = 16


# -----------------------------
# World model
# -----------------------------

@dataclass(frozen=True)
class PairRule:
    subject: int
    object: int
    weight: float
    predicates: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class ContextRule:
    trigger: int
    subject: int
    object: int
    predicates: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class WorldModel:
    name: str
    vocab: Vocabulary
    rules: tuple[PairRule, ...]
    context: tuple[ContextRule, ...]
    scenery: tuple[tuple[int, float], ...]
    fillers: tuple[tuple[int, float], ...]
    predicate_range: tuple[int, int]
    min_entities: int
    extra_fillers: tuple[int, int]
    reuse_prob: float
    seed: int
    source: str  # canonical JSON of the declaring document

    @classmethod
    def from_dict(cls, doc: dict[str, Any], *, name: str = "") -> "WorldModel":
        doc = load_block(doc, validate_world_block)
        vocab = Vocabulary(tuple(doc["entity_classes"]), tuple(doc["predicate_classes"]))
        e, p = vocab.entity_id, vocab.predicate_id

        def dist(d: dict[str, float]) -> tuple[tuple[int, float], ...]:
            return tuple((p(k), float(v)) for k, v in d.items())

        rules = tuple(
            PairRule(e(r["subject"]), e(r["object"]), float(r.get("weight", 1.0)), dist(r["predicates"]))
            for r in doc["rules"]
        )
        context = tuple(
            ContextRule(e(c["trigger"]), e(c["subject"]), e(c["object"]), dist(c["predicates"]))
            for c in doc.get("context", [])
        )
        sizes = doc.get("sizes", {})
        return cls(
            name=name or doc.get("name", ""),
            vocab=vocab,
            rules=rules,
            context=context,
            scenery=tuple((e(k), float(v)) for k, v in doc.get("scenery", {}).items()),
            fillers=tuple((e(k), float(v)) for k, v in doc.get("fillers", {}).items()),
            predicate_range=tuple(sizes.get("predicates", [4, 9])),
            min_entities=int(sizes.get("min_entities", 5)),
            extra_fillers=tuple(sizes.get("extra_fillers", [0, 1])),
            reuse_prob=float(sizes.get("reuse_prob", 0.3)),
            seed=int(doc.get("seed", 0)),
            source=json.dumps(doc, sort_keys=True, separators=(",", ":")),
        )

    def pair_weights(self) -> np.ndarray:
        w = np.array([r.weight for r in self.rules], dtype=np.float64)
        return w / w.sum()

    def distribution(self, rule_index: int, triggers: frozenset[int]) -> dict[int, float]:
        """Predicate distribution of a rule pair given the triggers present in the scene."""
        rule = self.rules[rule_index]
        for ctx in self.context:
            if ctx.trigger in triggers and (ctx.subject, ctx.object) == (rule.subject, rule.object):
                return dict(ctx.predicates)
        return dict(rule.predicates)


def load_world(path: str | Path) -> WorldModel:
    p = Path(path)
    world = WorldModel.from_dict(load_json(p), name=p.stem)
    logger.info(
        "Loaded world {!r}: {} entity classes, {} predicates, {} rules, {} context rules",
        world.name, world.vocab.num_entities, world.vocab.num_predicates, len(world.rules), len(world.context),
    )
    return world


def world_hash(world: WorldModel) -> str:
    return hashlib.sha256(world.source.encode("utf-8")).hexdigest()


# -----------------------------
# Sampling
# -----------------------------

def _draw(rng: np.random.Generator, table: tuple[tuple[int, float], ...] | dict[int, float]) -> int:
    items = list(table.items()) if isinstance(table, dict) else list(table)
    ids = [i for i, _ in items]
    probs = np.array([w for _, w in items], dtype=np.float64)
    return int(ids[rng.choice(len(ids), p=probs / probs.sum())])


def _random_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    return tuple(round(float(v), 4) for v in rng.uniform(0.0, 1.0, size=4))


def sample_graph(world: WorldModel, rng: np.random.Generator) -> SceneGraph:
    entities: list[EntityNode] = []
    by_class: dict[int, list[int]] = {}

    def new_entity(cls: int) -> int:
        entities.append(EntityNode(cls, _random_box(rng)))
        by_class.setdefault(cls, []).append(len(entities) - 1)
        return len(entities) - 1

    triggers = set()
    for cls, prob in world.scenery:
        if rng.random() < prob:
            triggers.add(cls)
            new_entity(cls)
    present = frozenset(triggers)

    def pick(cls: int, avoid: int = -1) -> int:
        candidates = [i for i in by_class.get(cls, []) if i != avoid and entities[i].class_id not in present]
        if candidates and rng.random() < world.reuse_prob:
            return candidates[int(rng.integers(len(candidates)))]
        return new_entity(cls)

    weights = world.pair_weights()
    lo, hi = world.predicate_range
    predicates: list[PredicateNode] = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        r = int(rng.choice(len(world.rules), p=weights))
        rule = world.rules[r]
        s = pick(rule.subject)
        o = pick(rule.object, avoid=s)
        predicates.append(PredicateNode(_draw(rng, world.distribution(r, present)), s, o))

    if world.fillers:
        extra_lo, extra_hi = world.extra_fillers
        n_fill = max(world.min_entities - len(entities), 0) + int(rng.integers(extra_lo, extra_hi + 1))
        for _ in range(n_fill):
            new_entity(_draw(rng, world.fillers))

    return SceneGraph(tuple(entities), tuple(predicates))


def sample_corpus(world: WorldModel, n: int, seed: int) -> list[SceneGraph]:
    """Graph i is drawn from its own stream default_rng([seed, i])."""
    return [sample_graph(world, np.random.default_rng([seed, i])) for i in range(n)]


# -----------------------------
# Exact ceilings
# -----------------------------

def _trigger_states(world: WorldModel) -> list[tuple[frozenset[int], float]]:
    """Every subset of scenery triggers with its probability."""
    pair_classes = {c for r in world.rules for c in (r.subject, r.object)}
    filler_classes = {c for c, w in world.fillers if w > 0}
    scenery = [(c, p) for c, p in world.scenery]
    for c, _ in scenery:
        name = world.vocab.entity_classes[c]
        if c in pair_classes:
            raise WorldNotEnumerableError(f"Trigger {name!r} also appears in a rule pair")
        if c in filler_classes:
            raise WorldNotEnumerableError(f"Trigger {name!r} is also a filler class")
    if len(scenery) > MAX_ENUMERABLE_TRIGGERS:
        raise WorldNotEnumerableError(
            f"{len(scenery)} scenery triggers exceed the enumeration limit of {MAX_ENUMERABLE_TRIGGERS}"
        )

    states = []
    for bits in itertools.product((False, True), repeat=len(scenery)):
        prob = 1.0
        for (_, p), on in zip(scenery, bits):
            prob *= p if on else 1.0 - p
        states.append((frozenset(c for (c, _), on in zip(scenery, bits) if on), prob))
    return states


def _distribution_vector(world: WorldModel, rule_index: int, triggers: frozenset[int]) -> np.ndarray:
    v = np.zeros(world.vocab.num_predicates, dtype=np.float64)
    for p, prob in world.distribution(rule_index, triggers).items():
        v[p] += prob
    return v


def full_ceiling(world: WorldModel) -> float:
    states = _trigger_states(world)
    w = world.pair_weights()
    return float(sum(
        w[r] * sum(pt * _distribution_vector(world, r, t).max() for t, pt in states)
        for r in range(len(world.rules))
    ))


def local_ceiling(world: WorldModel) -> float:
    """Best masked-predicate accuracy from the subject and object classes alone."""
    states = _trigger_states(world)
    w = world.pair_weights()
    return float(sum(
        w[r] * sum(pt * _distribution_vector(world, r, t) for t, pt in states).max()
        for r in range(len(world.rules))
    ))


def masked_bag_ceiling(
    world: WorldModel, graphs: Sequence[SceneGraph], rate: float = 0.3, seed: int = 0
) -> float:
    """
    Upper bound on masked-predicate accuracy over graphs drawn from `world`, for
    predictors whose output depends only on the bag of visible node classes.

    Graph i is masked with default_rng([seed, i]), the masks masked_accuracy
    scores. All masked nodes share the mask token, so such a predictor gives
    every masked predicate of a graph the same class. Even when told the
    triggers and the rule pair behind each masked predicate, its best single
    class scores max_c sum_j P_j(c) in expectation, pooled by count.
    """
    _trigger_states(world)
    rule_of = {(r.subject, r.object): i for i, r in enumerate(world.rules)}
    scenery = {c for c, _ in world.scenery}
    expected, total = 0.0, 0
    for i, g in enumerate(graphs):
        if g.num_nodes == 0:
            continue
        mg = mask_nodes(g, rate, np.random.default_rng([seed, i]), world.vocab)
        triggers = frozenset(scenery.intersection(g.entity_classes()))
        summed = np.zeros(world.vocab.num_predicates, dtype=np.float64)
        masked = 0
        for idx in mg.masked_indices:
            if idx < g.num_entities:
                continue
            p = g.predicates[idx - g.num_entities]
            pair = (g.entities[p.subject].class_id, g.entities[p.object].class_id)
            if pair not in rule_of:
                raise WorldNotEnumerableError(f"Predicate {idx} links a pair no rule of the world declares: {pair}")
            summed += _distribution_vector(world, rule_of[pair], triggers)
            masked += 1
        if masked:
            expected += float(summed.max())
            total += masked
    return expected / total if total else float("nan")


def global_ceiling(world: WorldModel, *, mask_rate: float = 0.3, graphs: int = 2000, seed: int = 0) -> float:
    """masked_bag_ceiling over a seeded sample of the world; masks use seed + 1."""
    return masked_bag_ceiling(world, sample_corpus(world, graphs, seed), mask_rate, seed + 1)


def ceilings(world: WorldModel, *, mask_rate: float = 0.3) -> dict[str, float]:
    return {
        "local": local_ceiling(world),
        "global": global_ceiling(world, mask_rate=mask_rate),
        "full": full_ceiling(world),
    }


# -----------------------------
# Files
# -----------------------------

def load_corpus(path: str | Path, vocab: Vocabulary) -> list[SceneGraph]:
    return CorpusJsonlIO(vocab).load(path)


def save_corpus(graphs: list[SceneGraph], path: str | Path, vocab: Vocabulary) -> None:
    CorpusJsonlIO(vocab).save(graphs, path)


def write_manifest(path: str | Path, *, world: WorldModel, seed: int, n: int) -> dict[str, Any]:
    manifest = {"seed": seed, "n": n, "world_hash": world_hash(world), "world_name": world.name}
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest
