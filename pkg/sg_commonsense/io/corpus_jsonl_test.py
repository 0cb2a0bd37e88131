import json

import numpy as np
import polars as pl
import pytest

from sg_commonsense.errors import CorpusLoadError
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.io.corpus_jsonl import CorpusJsonlIO


def test_validate_vocabulary_flags_duplicates_and_empty_lists():
    io = CorpusJsonlIO()
    f = io.validate_vocabulary({"entity_classes": ["a", "a"], "predicate_classes": []})

    assert isinstance(f, pl.DataFrame)
    assert set(f["rule_id"].to_list()) == {"VOCAB_001", "VOCAB_002"}


def test_validate_vocabulary_requires_object():
    f = CorpusJsonlIO().validate_vocabulary(["person"])
    assert f["rule_id"].to_list() == ["VOCAB_000"]


def test_load_vocabulary(mock_corpus):
    io = CorpusJsonlIO()
    vocab = io.load_vocabulary(mock_corpus.with_name("tiny_corpus.vocab.json"))

    assert vocab.entity_classes[0] == "person"
    assert io.vocab is vocab


def test_load_vocabulary_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        CorpusJsonlIO().load_vocabulary(tmp_path / "nope.json")


def test_record_to_graph_happy_path(vocab):
    io = CorpusJsonlIO(vocab)
    record = {
        "entities": [{"class": "person", "box": [0.1, 0.1, 0.5, 0.9]}, {"class": "horse"}],
        "predicates": [{"class": "riding", "subject": 0, "object": 1}],
    }
    g, f = io.record_to_graph(record, line=1)

    assert f.height == 0
    assert g.entities[0].box == (0.1, 0.1, 0.5, 0.9)
    assert io.graph_to_record(g) == record


def test_record_to_graph_collects_findings(vocab):
    io = CorpusJsonlIO(vocab)
    record = {
        "entities": [{"class": "person", "box": [0.0, 2.0, 0.0, 0.0]}, {"class": "horse"}],
        "predicates": [{"class": "flying", "subject": 0, "object": 1}, {"class": "riding", "subject": 1, "object": 1}],
        "caption": "x",
    }
    g, f = io.record_to_graph(record, line=4)

    assert g is None
    assert {"SG_005", "SG_006", "SG_007", "SG_008"} <= set(f["rule_id"].to_list())
    assert set(f["row_index"].to_list()) == {4}


def test_record_must_be_object(vocab):
    g, f = CorpusJsonlIO(vocab).record_to_graph([1, 2], line=2)
    assert g is None
    assert f["rule_id"].to_list() == ["SG_001"]


def test_read_is_best_effort_and_load_is_strict(tmp_path, vocab):
    path = tmp_path / "mixed.jsonl"
    path.write_text(
        json.dumps({"entities": [{"class": "person"}], "predicates": []}) + "\n"
        + "{not json\n"
        + json.dumps({"entities": [{"class": "horse"}], "predicates": []}) + "\n",
        encoding="utf-8",
    )
    io = CorpusJsonlIO(vocab)

    graphs, f = io.read(path)
    assert len(graphs) == 2
    assert f.filter(pl.col("rule_id") == "SG_000")["row_index"].to_list() == [2]

    with pytest.raises(CorpusLoadError, match="line 2") as info:
        io.load(path)
    assert info.value.line == 2


def test_mock_corpus_skips_blank_lines(mock_corpus):
    io = CorpusJsonlIO()
    io.load_vocabulary(mock_corpus.with_name("tiny_corpus.vocab.json"))
    graphs = io.load(mock_corpus)

    assert len(graphs) == 5
    assert graphs[4].num_predicates == 0


def test_mock_bad_corpus_names_line(mock_corpus):
    io = CorpusJsonlIO()
    io.load_vocabulary(mock_corpus.with_name("bad_corpus.vocab.json"))
    with pytest.raises(CorpusLoadError, match="line 2: SG_004"):
        io.load(mock_corpus.with_name("bad_corpus.jsonl"))


def test_save_is_canonical(tmp_path, vocab, riding_graph):
    io = CorpusJsonlIO(vocab)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    io.save([riding_graph, riding_graph], a)
    io.save([riding_graph, riding_graph], b)

    assert a.read_bytes() == b.read_bytes()
    assert io.load(a) == [riding_graph, riding_graph]


def test_scored_graphs_keep_logits_and_provenance(tmp_path, vocab, riding_graph):
    rng = np.random.default_rng(0)
    widths = [vocab.num_entities] * 3 + [vocab.num_predicates] * 2
    sg = ScoredGraph.from_logits(riding_graph, [rng.normal(size=w) for w in widths])
    path = tmp_path / "scored.jsonl"
    io = CorpusJsonlIO(vocab)

    io.save_scored([sg], path, provenance=[["agreement"] * 5])
    loaded = io.load_scored(path)[0]

    assert loaded.classes() == sg.classes()
    for a, b in zip(loaded.node_logits, sg.node_logits):
        assert np.array_equal(a, b)
    assert json.loads(path.read_text())["provenance"] == ["agreement"] * 5


def test_scored_record_with_wrong_logit_width(vocab, riding_graph):
    io = CorpusJsonlIO(vocab)
    record = io.graph_to_record(riding_graph)
    record["logits"] = [[0.0] * 2] * 5

    sg, f = io.record_to_scored(record, line=3)
    assert sg is None
    assert "SG_020" in f["rule_id"].to_list()
