import json
from collections import Counter

import numpy as np
import pytest

from sg_commonsense.corpus import (
    WorldModel,
    ceilings,
    full_ceiling,
    global_ceiling,
    load_corpus,
    load_world,
    local_ceiling,
    masked_bag_ceiling,
    sample_corpus,
    sample_graph,
    save_corpus,
    world_hash,
    write_manifest,
)
from sg_commonsense.errors import ConfigError, CorpusLoadError, WorldNotEnumerableError
from sg_commonsense.glat import mask_nodes
from sg_commonsense.metrics import masked_accuracy
from sg_commonsense.scene_graph import to_triplets


def _world(base, override=None, *, scenery=0.5, fillers=None, **sizes):
    doc = {
        "entity_classes": ["person", "horse", "mountain", "tree"],
        "predicate_classes": ["riding", "near", "watching"],
        "rules": [{"subject": "person", "object": "horse", "weight": 1.0, "predicates": base}],
        "scenery": {"mountain": scenery},
        "fillers": fillers if fillers is not None else {"tree": 1.0},
        "sizes": {"predicates": [1, 4], "min_entities": 3, "extra_fillers": [0, 1], "reuse_prob": 0.3, **sizes},
    }
    if override is not None:
        doc["context"] = [{"trigger": "mountain", "subject": "person", "object": "horse", "predicates": override}]
    return WorldModel.from_dict(doc, name="test")


# ---------- Sampling ----------

def test_deterministic_rule_always_applies():
    world = _world({"riding": 1.0})
    for g in sample_corpus(world, 50, seed=0):
        assert all(t == ("person", "riding", "horse") for t in to_triplets(g, world.vocab))


def test_context_trigger_overrides_pair():
    world = _world({"riding": 1.0}, {"watching": 1.0})
    mountain = world.vocab.entity_id("mountain")
    seen_mountain = False
    for g in sample_corpus(world, 100, seed=1):
        triplets = to_triplets(g, world.vocab)
        if mountain in g.entity_classes():
            seen_mountain = True
            assert ("person", "riding", "horse") not in triplets
        else:
            assert ("person", "watching", "horse") not in triplets
    assert seen_mountain


def test_triggers_are_isolated_entities():
    world = _world({"riding": 1.0}, {"watching": 1.0}, scenery=1.0)
    mountain = world.vocab.entity_id("mountain")
    for g in sample_corpus(world, 20, seed=2):
        linked = {i for link in g.links() for i in link}
        assert all(i not in linked for i, c in enumerate(g.entity_classes()) if c == mountain)


def test_sizes_are_respected():
    world = _world({"riding": 1.0}, min_entities=5)
    for g in sample_corpus(world, 50, seed=3):
        assert 1 <= g.num_predicates <= 4
        assert g.num_entities >= 5


def test_sampling_is_deterministic_per_graph():
    world = _world({"riding": 0.5, "near": 0.5})
    a = sample_corpus(world, 10, seed=7)
    b = sample_corpus(world, 10, seed=7)

    assert a == b
    assert a[4] == sample_graph(world, np.random.default_rng([7, 4]))


# ---------- Ceilings ----------

def test_trigger_flipping_answer_half_the_time():
    world = _world({"riding": 0.8, "near": 0.2}, {"watching": 1.0})
    assert local_ceiling(world) == pytest.approx(0.5)
    assert full_ceiling(world) == pytest.approx(0.9)


def test_local_ceiling_with_agreeing_override():
    world = _world({"riding": 0.8, "near": 0.2}, {"riding": 1.0})
    assert local_ceiling(world) == pytest.approx(0.5 + 0.5 * 0.8)


def test_no_context_local_equals_full():
    world = _world({"riding": 0.7, "near": 0.3})
    assert local_ceiling(world) == pytest.approx(full_ceiling(world))
    assert full_ceiling(world) == pytest.approx(0.7)


def test_deterministic_world_ceiling_is_one():
    assert full_ceiling(_world({"riding": 1.0})) == pytest.approx(1.0)


def _two_pair_world(predicates, *, context=True):
    doc = {
        "entity_classes": ["person", "horse", "shirt", "mountain", "tree"],
        "predicate_classes": ["riding", "wearing", "watching"],
        "rules": [
            {"subject": "person", "object": "horse", "predicates": {"riding": 1.0}},
            {"subject": "person", "object": "shirt", "predicates": {"wearing": 1.0}},
        ],
        "scenery": {"mountain": 0.5},
        "fillers": {"tree": 1.0},
        "sizes": {"predicates": predicates, "min_entities": 3, "extra_fillers": [0, 1], "reuse_prob": 0.3},
    }
    if context:
        doc["context"] = [{"trigger": "mountain", "subject": "person", "object": "horse",
                           "predicates": {"watching": 1.0}}]
    return WorldModel.from_dict(doc, name="two_pair")


class BagCounter:
    """Majority masked-predicate class per sorted bag of visible tokens."""

    def __init__(self, graphs, vocab, rate, seed):
        self.table = {}
        for i, g in enumerate(graphs):
            mg = mask_nodes(g, rate, np.random.default_rng([seed, i]), vocab)
            counts = self.table.setdefault(tuple(sorted(mg.tokens)), Counter())
            counts.update(c for idx, c in zip(mg.masked_indices, mg.truth) if idx >= g.num_entities)

    def predict_masked(self, mg):
        counts = self.table.get(tuple(sorted(mg.tokens)))
        best = counts.most_common(1)[0][0] if counts else 0
        return [best] * len(mg.tokens)


def test_global_ceiling_sees_the_bag_of_classes():
    world = _two_pair_world([1, 1])
    graphs = sample_corpus(world, 2000, seed=0)
    counter = BagCounter(graphs, world.vocab, 0.3, seed=1)
    acc = masked_accuracy(counter, graphs, world.vocab, 0.3, seed=1)

    assert global_ceiling(world) == pytest.approx(1.0)
    assert acc.predicate <= masked_bag_ceiling(world, graphs, 0.3, seed=1) + 0.02


def test_global_ceiling_gives_one_class_to_every_masked_predicate():
    # both predicates always masked; they share a rule half the time
    world = _two_pair_world([2, 2], context=False)
    assert global_ceiling(world, mask_rate=0.99) == pytest.approx(0.75, abs=0.02)


def test_global_ceiling_is_deterministic():
    world = _world({"riding": 0.8, "near": 0.2}, {"watching": 1.0})
    assert global_ceiling(world, graphs=200) == global_ceiling(world, graphs=200)
    assert global_ceiling(world) <= full_ceiling(world) + 0.02


def test_trigger_used_as_filler_is_not_enumerable():
    world = _world({"riding": 1.0}, {"watching": 1.0}, fillers={"mountain": 1.0})
    with pytest.raises(WorldNotEnumerableError):
        ceilings(world)


def test_shipped_world_ceilings_are_ordered(world_path):
    c = ceilings(load_world(world_path))
    assert c["local"] < c["full"] <= 1.0
    assert c["global"] <= c["full"] + 0.02


# ---------- Config ----------

def test_context_rule_needs_base_rule():
    doc = {
        "entity_classes": ["person", "horse", "mountain"],
        "predicate_classes": ["riding"],
        "rules": [{"subject": "person", "object": "horse", "predicates": {"riding": 1.0}}],
        "context": [{"trigger": "mountain", "subject": "horse", "object": "person", "predicates": {"riding": 1.0}}],
    }
    with pytest.raises(ConfigError, match="CFG_104"):
        WorldModel.from_dict(doc)


def test_distribution_must_sum_to_one():
    with pytest.raises(ConfigError):
        _world({"riding": 0.5, "near": 0.2})


# ---------- Files ----------

def _file_world():
    return _world({"riding": 0.6, "near": 0.4}, {"watching": 1.0})


def test_save_then_load_keeps_structure(tmp_path):
    world = _file_world()
    graphs = sample_corpus(world, 100, seed=11)
    path = tmp_path / "corpus.jsonl"

    save_corpus(graphs, path, world.vocab)
    loaded = load_corpus(path, world.vocab)

    assert [g.links() for g in loaded] == [g.links() for g in graphs]
    assert [g.entity_classes() + g.predicate_classes() for g in loaded] == \
        [g.entity_classes() + g.predicate_classes() for g in graphs]


def test_empty_file_is_empty_corpus(tmp_path, vocab):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    assert load_corpus(path, vocab) == []


def test_unknown_class_names_line(tmp_path, vocab):
    path = tmp_path / "bad.jsonl"
    good = {"entities": [{"class": "person"}], "predicates": []}
    bad = {"entities": [{"class": "unicorn"}], "predicates": []}
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n", encoding="utf-8")

    with pytest.raises(CorpusLoadError, match="line 2.*unicorn") as info:
        load_corpus(path, vocab)
    assert info.value.line == 2


def test_manifest_records_world_hash(tmp_path):
    world = _file_world()
    manifest = write_manifest(tmp_path / "m.json", world=world, seed=3, n=10)

    assert manifest["world_hash"] == world_hash(world)
    assert json.loads((tmp_path / "m.json").read_text()) == manifest
