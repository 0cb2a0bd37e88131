import math
from collections import Counter

import numpy as np
import polars as pl
import pytest

from sg_commonsense.baselines import FrequencyPredictor, build_frequency
from sg_commonsense.errors import ContractError
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.metrics import (
    bin_index,
    binned_recall,
    masked_accuracy,
    mean_recall,
    mean_recall_at_k,
    node_accuracy,
    ranked_triplets,
    recall_at_k,
    report_frame,
    write_report,
)
from sg_commonsense.scene_graph import EntityNode, SceneGraph, from_triplets


class TruthCopier:
    """Returns the hidden class at every masked position."""

    def predict_masked(self, mg):
        out = mg.base.entity_classes() + mg.base.predicate_classes()
        for idx, c in zip(mg.masked_indices, mg.truth):
            out[idx] = c
        return out


def _scored(graph, vocab, predicate_scores):
    """Entity rows one-hot on the true class; predicate j gets score predicate_scores[j] on its class."""
    rows = []
    for e in graph.entities:
        rows.append(np.eye(vocab.num_entities)[e.class_id] * 5.0)
    for p, s in zip(graph.predicates, predicate_scores):
        rows.append(np.eye(vocab.num_predicates)[p.class_id] * s)
    return ScoredGraph.from_logits(graph, rows)


def _people(vocab, n=3):
    return [EntityNode(vocab.entity_id(c)) for c in ("person", "horse", "shirt", "box")[:n]]


# ---------- masked_accuracy ----------

def test_truth_copying_predictor_scores_one(vocab, riding_graph):
    acc = masked_accuracy(TruthCopier(), [riding_graph] * 20, vocab, rate=0.5, seed=0)

    assert acc.as_row() == {"entity": 1.0, "predicate": 1.0, "both": 1.0}
    assert acc.entity_count + acc.predicate_count == 20 * 3


def test_frequency_predictor_reports_predicates_only(vocab, riding_graph):
    predictor = FrequencyPredictor(build_frequency([riding_graph]))
    acc = masked_accuracy(predictor, [riding_graph] * 10, vocab, rate=0.1, seed=1)

    assert acc.entity is None and acc.both is None
    assert acc.predicate in (None, 1.0)


def test_masked_accuracy_skips_empty_graphs(vocab):
    acc = masked_accuracy(TruthCopier(), [SceneGraph()], vocab)
    assert acc.as_row() == {"entity": None, "predicate": None, "both": None}


# ---------- recall ----------

def test_recall_counts_matched_ground_truth(vocab):
    gt = from_triplets([(0, "riding", 1), (0, "wearing", 2)], _people(vocab), vocab)
    pred_graph = from_triplets([(0, "riding", 1), (0, "near", 2)], _people(vocab), vocab)
    pred = _scored(pred_graph, vocab, [4.0, 3.0])

    assert recall_at_k(pred, gt, 50) == 0.5
    assert math.isnan(recall_at_k(pred, SceneGraph(tuple(_people(vocab))), 50))


def test_recall_needs_entity_indices_to_agree(vocab):
    entities = [EntityNode(vocab.entity_id("person"))] * 2 + [EntityNode(vocab.entity_id("horse"))]
    gt = from_triplets([(0, "riding", 2)], entities, vocab)
    pred = _scored(from_triplets([(1, "riding", 2)], entities, vocab), vocab, [5.0])

    assert recall_at_k(pred, gt, 10) == 0.0
    assert recall_at_k(pred, gt, 10, entity_ids=[1, 0, 2]) == 1.0


def test_ranking_is_by_confidence_then_index(vocab):
    g = from_triplets([(0, "riding", 1), (0, "near", 1), (0, "wearing", 2)], _people(vocab), vocab)
    pred = _scored(g, vocab, [1.0, 6.0, 6.0])

    top = ranked_triplets(pred, 2)
    assert [t[1] for t in top] == [vocab.predicate_id("near"), vocab.predicate_id("wearing")]
    with pytest.raises(ContractError):
        ranked_triplets(pred, 0)


def test_graph_constraint_keeps_one_predicate_per_pair(vocab):
    g = from_triplets([(0, "riding", 1), (0, "near", 1), (0, "wearing", 2)], _people(vocab), vocab)
    gt = from_triplets([(0, "riding", 1), (0, "near", 1)], _people(vocab), vocab)
    pred = _scored(g, vocab, [5.0, 4.0, 3.0])

    assert [t[3:] for t in ranked_triplets(pred, 50, graph_constraint=True)] == [(0, 1), (0, 2)]
    assert recall_at_k(pred, gt, 50, graph_constraint=True) == 0.5
    assert recall_at_k(pred, gt, 50) == 1.0


def test_recall_matches_multiset_brute_force(vocab):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n_e = int(rng.integers(2, 5))
        entities = [EntityNode(int(c)) for c in rng.integers(0, 3, size=n_e)]

        def random_triplets(m):
            out = []
            for _ in range(m):
                s, o = rng.choice(n_e, size=2, replace=False)
                out.append((int(s), int(rng.integers(0, 3)), int(o)))
            return out

        gt = from_triplets(random_triplets(int(rng.integers(1, 6))), entities)
        pg = from_triplets(random_triplets(int(rng.integers(1, 8))), entities)
        pred = _scored(pg, vocab, rng.uniform(0.5, 5.0, size=pg.num_predicates))
        k = int(rng.integers(1, 8))

        order = sorted(range(pg.num_predicates), key=lambda j: (-pred.node_confidence[n_e + j], j))[:k]
        top = Counter((pg.entities[pg.predicates[j].subject].class_id, pg.predicates[j].class_id,
                       pg.entities[pg.predicates[j].object].class_id,
                       pg.predicates[j].subject, pg.predicates[j].object) for j in order)
        truth = Counter((gt.entities[p.subject].class_id, p.class_id, gt.entities[p.object].class_id,
                         p.subject, p.object) for p in gt.predicates)
        expected = sum((top & truth).values()) / gt.num_predicates

        assert recall_at_k(pred, gt, k) == pytest.approx(expected)


def test_mean_recall_matches_brute_force(vocab):
    rng = np.random.default_rng(11)
    preds, gts = [], []
    per_class = {}
    for _ in range(100):
        entities = [EntityNode(int(c)) for c in rng.integers(0, 3, size=3)]
        pairs = [(0, 1), (1, 2), (2, 0), (1, 0)]

        def triplets(m):
            out = []
            for _ in range(m):
                s, o = pairs[int(rng.integers(0, len(pairs)))]
                out.append((s, int(rng.integers(0, 3)), o))
            return out

        gt = from_triplets(triplets(int(rng.integers(1, 7))), entities)
        pg = from_triplets(triplets(int(rng.integers(1, 7))), entities)
        pred = _scored(pg, vocab, rng.uniform(0.5, 5.0, size=pg.num_predicates))
        preds.append(pred)
        gts.append(gt)

        order = sorted(range(pg.num_predicates), key=lambda j: (-pred.node_confidence[3 + j], j))[:3]
        top = Counter((p.class_id, p.subject, p.object) for p in (pg.predicates[j] for j in order))
        truth = Counter((p.class_id, p.subject, p.object) for p in gt.predicates)
        for c in {t[0] for t in truth}:
            hit = sum(min(n, top[t]) for t, n in truth.items() if t[0] == c)
            total = sum(n for t, n in truth.items() if t[0] == c)
            per_class.setdefault(c, []).append(hit / total)

    expected = np.mean([np.mean(v) for v in per_class.values()])
    assert mean_recall(preds, gts, 3) == pytest.approx(expected)


def test_mean_recall_with_one_class_equals_recall(vocab):
    gts, preds = [], []
    for hit in (True, False, True):
        gt = from_triplets([(0, "riding", 1)], _people(vocab), vocab)
        pg = gt if hit else from_triplets([(1, "riding", 0)], _people(vocab), vocab)
        gts.append(gt)
        preds.append(_scored(pg, vocab, [3.0]))

    assert mean_recall(preds, gts, 50) == pytest.approx(2 / 3)
    assert mean_recall_at_k(preds, gts, 50) == pytest.approx(2 / 3)


def test_mean_recall_averages_classes(vocab):
    gt = from_triplets([(0, "riding", 1), (0, "wearing", 2), (0, "wearing", 1)], _people(vocab), vocab)
    pred = _scored(from_triplets([(0, "riding", 1)], _people(vocab), vocab), vocab, [3.0])

    assert mean_recall([pred], [gt], 50) == pytest.approx(0.5)
    assert mean_recall_at_k([pred], [gt], 50) == pytest.approx(1 / 3)


def test_corpus_recall_skips_images_without_triplets(vocab):
    empty = SceneGraph(tuple(_people(vocab)))
    gt = from_triplets([(0, "riding", 1)], _people(vocab), vocab)
    pred = _scored(gt, vocab, [3.0])

    assert mean_recall_at_k([pred, _scored(empty, vocab, [])], [gt, empty], 50) == 1.0
    assert math.isnan(mean_recall_at_k([_scored(empty, vocab, [])], [empty], 50))
    with pytest.raises(ContractError):
        mean_recall_at_k([pred], [gt, gt], 50)


# ---------- binned recall ----------

@pytest.mark.parametrize("count, expected", [(0, 0), (1, 0), (3, 0), (4, 1), (9, 1), (10, 2), (27, 2),
                                             (28, 3), (82, 4), (243, 4), (244, 5), (10_000, 5)])
def test_bin_index_edges(count, expected):
    assert bin_index(count) == expected


def test_binned_recall_splits_by_training_count(vocab):
    common = from_triplets([(0, "riding", 1)], _people(vocab), vocab)
    rare = from_triplets([(0, "wearing", 2)], _people(vocab), vocab)
    train = build_frequency([common] * 5 + [rare])

    gt = from_triplets([(0, "riding", 1), (0, "wearing", 2)], _people(vocab), vocab)
    pred = _scored(common, vocab, [3.0])
    report = binned_recall([pred], [gt], train, 50)

    assert report.rows[0].recall == 0.0
    assert report.rows[1].recall == 1.0
    assert all(math.isnan(r.recall) for r in report.rows[2:])
    assert report.average_recall == pytest.approx(0.5)
    assert sum(r.pct_instances for r in report.rows) == pytest.approx(1.0)

    df = report.to_frame()
    assert df.height == 6
    assert df["bin_lo"].to_list() == [1, 4, 10, 28, 82, 244]


def test_binned_recall_instance_average(vocab):
    train = build_frequency([])
    gt = from_triplets([(0, "riding", 1), (0, "wearing", 2)], _people(vocab), vocab)
    pred = _scored(from_triplets([(0, "riding", 1)], _people(vocab), vocab), vocab, [3.0])

    report = binned_recall([pred, pred], [gt, gt], train, 50, average="instance")
    assert report.rows[0].instances == 4
    assert report.rows[0].recall == 0.5
    with pytest.raises(ContractError):
        binned_recall([pred], [gt], train, 50, average="median")


# ---------- node accuracy and reports ----------

def test_node_accuracy(vocab, riding_graph):
    wrong = riding_graph.with_classes([0, 0, 2], [0, 0])
    rows = [np.eye(vocab.num_entities)[c] for c in wrong.entity_classes()]
    rows += [np.eye(vocab.num_predicates)[c] for c in wrong.predicate_classes()]
    acc = node_accuracy([ScoredGraph.from_logits(wrong, rows)], [riding_graph])

    assert acc.entity == pytest.approx(2 / 3)
    assert acc.predicate == 0.5
    assert acc.overall == pytest.approx(3 / 5)

    with pytest.raises(ContractError):
        node_accuracy([ScoredGraph.from_logits(wrong, rows)], [SceneGraph(riding_graph.entities)])


def test_write_report_csv_and_json(tmp_path):
    df = report_frame([{"method": "glat", "r50": 0.5}, {"method": "frequency", "r50": 0.25}])

    write_report(df, tmp_path / "out" / "sgg.csv")
    assert pl.read_csv(tmp_path / "out" / "sgg.csv")["method"].to_list() == ["glat", "frequency"]

    write_report(df, tmp_path / "sgg.json")
    assert pl.read_json(tmp_path / "sgg.json")["r50"].to_list() == [0.5, 0.25]
