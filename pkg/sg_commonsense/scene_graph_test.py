import numpy as np
import pytest

from sg_commonsense.errors import ContractError, StructureError
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.scene_graph import (
    EntityNode,
    PredicateNode,
    SceneGraph,
    Vocabulary,
    adjacency_masks,
    from_triplets,
    prune_scored_top_k,
    prune_top_k,
    select_predicates,
    to_triplets,
    top_k_predicates,
    validate_graph,
)


def _entities(vocab, *names):
    return [EntityNode(vocab.entity_id(n)) for n in names]


def test_from_triplets_single_predicate(vocab):
    g = from_triplets([(0, "riding", 1)], _entities(vocab, "person", "horse"), vocab)

    assert g.num_entities == 2
    assert g.num_predicates == 1
    assert g.predicates[0] == PredicateNode(vocab.predicate_id("riding"), 0, 1)


def test_from_triplets_without_predicates(vocab):
    g = from_triplets([], _entities(vocab, "person"), vocab)
    assert (g.num_entities, g.num_predicates) == (1, 0)


def test_multiple_predicates_between_same_pair(vocab):
    g = from_triplets([(0, "near", 1), (0, "riding", 1)], _entities(vocab, "person", "horse"), vocab)
    assert g.links() == [(0, 1), (0, 1)]


def test_out_of_range_entity_index_is_structural_error(vocab):
    with pytest.raises(StructureError):
        from_triplets([(0, "riding", 2)], _entities(vocab, "person", "horse"), vocab)


def test_self_loop_is_structural_error(vocab):
    with pytest.raises(StructureError):
        from_triplets([(1, "riding", 1)], _entities(vocab, "person", "horse"), vocab)


def test_predicate_name_needs_vocabulary(vocab):
    with pytest.raises(ContractError):
        from_triplets([(0, "riding", 1)], _entities(vocab, "person", "horse"))


def test_vocabulary_rejects_duplicates():
    with pytest.raises(StructureError):
        Vocabulary(("person", "person"), ("on",))


def test_vocabulary_token_layout(vocab):
    assert vocab.token_of_entity(2) == 2
    assert vocab.token_of_predicate(0) == vocab.num_entities
    assert vocab.mask_token == vocab.num_entities + vocab.num_predicates
    assert vocab.size == vocab.mask_token + 1


def test_adjacency_masks_single_predicate(vocab):
    g = from_triplets([(0, "riding", 1)], _entities(vocab, "person", "horse"), vocab)
    m = adjacency_masks(g)

    assert set(zip(*np.nonzero(m.a_s))) == {(2, 0), (0, 2)}
    assert set(zip(*np.nonzero(m.a_o))) == {(2, 1), (1, 2)}


def test_adjacency_masks_without_predicates_are_zero(vocab):
    m = adjacency_masks(SceneGraph(tuple(_entities(vocab, "person", "horse"))))
    assert not m.a_s.any()
    assert not m.a_o.any()


def test_adjacency_masks_shared_subject(riding_graph):
    m = adjacency_masks(riding_graph)

    assert m.a_s[0].sum() == 2
    assert np.array_equal(m.a_s, m.a_s.T)
    assert not m.a_s.flags.writeable


def test_to_triplets_names(vocab):
    g = from_triplets([(0, "riding", 1)], _entities(vocab, "person", "horse"), vocab)
    assert to_triplets(g, vocab) == [("person", "riding", "horse")]
    assert to_triplets(SceneGraph(tuple(_entities(vocab, "person")))) == []


def test_validate_graph_flags_out_of_vocabulary_ids(vocab):
    g = SceneGraph((EntityNode(0), EntityNode(99)), (PredicateNode(42, 0, 1),))
    f = validate_graph(g, vocab, row_index=7)

    assert sorted(f["rule_id"].to_list()) == ["SG_010", "SG_011"]
    assert set(f["row_index"].to_list()) == {7}


def test_top_k_predicates_keeps_most_confident():
    assert top_k_predicates([0.9, 0.2, 0.8], 2) == [0, 2]
    assert top_k_predicates([0.5, 0.5, 0.5], 1) == [0]
    assert top_k_predicates([0.1], 0) == []


def test_top_k_predicates_rejects_negative_k():
    with pytest.raises(ContractError):
        top_k_predicates([0.1], -1)


def _scored(g: SceneGraph, vocab: Vocabulary, predicate_conf: list[float]) -> ScoredGraph:
    """Scored copy of g whose predicate confidences are ordered like predicate_conf."""
    logits = [np.eye(vocab.num_entities)[e.class_id] * 10 for e in g.entities]
    for p, c in zip(g.predicates, predicate_conf):
        logits.append(np.eye(vocab.num_predicates)[p.class_id] * c * 10)
    return ScoredGraph.from_logits(g, logits)


def test_prune_top_k_drops_unreferenced_entities(vocab):
    entities = _entities(vocab, "person", "horse", "shirt", "box", "mountain")
    g = from_triplets([(0, "riding", 1), (0, "wearing", 2), (4, "near", 3)], entities, vocab)
    sg = _scored(g, vocab, [0.9, 0.2, 0.8])

    pruned = prune_top_k(sg, 2)

    assert to_triplets(pruned, vocab) == [("person", "riding", "horse"), ("mountain", "near", "box")]
    assert pruned.num_entities == 4


def test_prune_top_k_with_large_k_keeps_all_predicates(vocab, riding_graph):
    g = SceneGraph(riding_graph.entities + (EntityNode(vocab.entity_id("mountain")),), riding_graph.predicates)
    pruned = prune_top_k(_scored(g, vocab, [0.5, 0.6]), 100)

    assert pruned.predicates == riding_graph.predicates
    assert pruned.num_entities == 3


def test_prune_top_k_zero_gives_empty_graph(vocab, riding_graph):
    pruned = prune_top_k(_scored(riding_graph, vocab, [0.5, 0.6]), 0)
    assert pruned.num_nodes == 0


def test_prune_scored_top_k_reports_original_indices(vocab):
    entities = _entities(vocab, "person", "horse", "shirt", "box", "mountain")
    g = from_triplets([(0, "riding", 1), (0, "wearing", 2), (4, "near", 3)], entities, vocab)

    pruned, entity_ids, kept = prune_scored_top_k(_scored(g, vocab, [0.1, 0.9, 0.8]), 2)

    assert kept == [1, 2]
    assert entity_ids == (0, 2, 3, 4)
    assert len(pruned.node_logits) == pruned.graph.num_nodes


def test_select_predicates_reindexes_in_order(vocab):
    entities = _entities(vocab, "person", "horse", "shirt")
    g = from_triplets([(0, "riding", 1), (2, "near", 1)], entities, vocab)

    sub, entity_ids = select_predicates(g, [1])

    assert entity_ids == (1, 2)
    assert sub.predicates == (PredicateNode(vocab.predicate_id("near"), 1, 0),)


def test_with_classes_keeps_structure(riding_graph):
    g = riding_graph.with_classes([1, 0, 2], [3, 3])

    assert g.same_structure(riding_graph)
    assert g.entity_classes() == [1, 0, 2]
    with pytest.raises(ContractError):
        riding_graph.with_classes([0], [0, 0])


def test_entity_box_must_be_in_unit_range():
    with pytest.raises(StructureError):
        EntityNode(0, (0.0, 0.5, 1.5, 0.2))
