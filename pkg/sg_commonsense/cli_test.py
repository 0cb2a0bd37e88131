import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from loguru import logger

from sg_commonsense import cli
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.io.corpus_jsonl import CorpusJsonlIO
from sg_commonsense.scene_graph import Vocabulary

MOCK_DATA = Path(__file__).parent.parent / "mock_data"
TINY = MOCK_DATA / "tiny_corpus.jsonl"
TINY_VOCAB = MOCK_DATA / "tiny_corpus.vocab.json"
WORLD = Path(__file__).parent / "configs" / "affordance_world.json"


@pytest.fixture(autouse=True)
def restore_logger():
    yield
    logger.remove()
    logger.add(sys.stderr)


class TruthCopier:
    def __init__(self, vocab):
        self.vocab = vocab

    def predict_masked(self, mg):
        out = mg.base.entity_classes() + mg.base.predicate_classes()
        for idx, c in zip(mg.masked_indices, mg.truth):
            out[idx] = c
        return out


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _error_line(capsys):
    err = capsys.readouterr().err
    return json.loads(next(line for line in reversed(err.splitlines()) if line.startswith('{"error"')))


def _tiny_vocab():
    return Vocabulary.from_dict(json.loads(TINY_VOCAB.read_text()))


def _write_config(tmp_path, **overrides):
    doc = {
        "model": {"layers": 1, "global_heads": 1, "subject_heads": 1, "object_heads": 0, "model_dim": 8},
        "training": {"epochs": 1, "accumulation": 2, "validation_fraction": 0.2},
    }
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# ---------- gen-corpus ----------

def test_gen_corpus_with_zero_graphs(tmp_path, capsys):
    out = tmp_path / "empty.jsonl"
    assert cli.main(["gen-corpus", "--world", str(WORLD), "--n", "0", "--out", str(out)]) == 0

    assert out.read_text() == ""
    assert (tmp_path / "empty.vocab.json").exists()
    assert _stdout_json(capsys)["n"] == 0


def test_gen_corpus_is_byte_identical_per_seed(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert cli.main(["gen-corpus", "--world", str(WORLD), "--n", "10", "--seed", "3", "--out", str(out)]) == 0

    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().count("\n") == 10


# ---------- error handling ----------

def test_missing_corpus_exits_with_file_status(tmp_path, capsys):
    code = cli.main(["train", "--corpus", str(tmp_path / "nope.jsonl"), "--vocab", str(TINY_VOCAB),
                     "--out", str(tmp_path / "m.json")])

    assert code == 2
    err = _error_line(capsys)
    assert err["exit_code"] == 2
    assert err["error"] == "FileNotFoundError"


def test_bad_corpus_line_exits_with_file_status(tmp_path, capsys):
    code = cli.main(["train", "--corpus", str(MOCK_DATA / "bad_corpus.jsonl"), "--out", str(tmp_path / "m.json")])

    assert code == 2
    assert "line 2" in _error_line(capsys)["message"]


def test_invalid_config_exits_with_config_status(tmp_path, capsys):
    config = _write_config(tmp_path, model={"layers": -1})
    code = cli.main(["train", "--corpus", str(TINY), "--config", str(config), "--out", str(tmp_path / "m.json")])

    assert code == 3
    err = _error_line(capsys)
    assert err["error"] == "ConfigError"
    assert "CFG_003" in err["message"]


def test_malformed_config_exits_with_file_status(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text('{"model": {"layers": 1,', encoding="utf-8")
    code = cli.main(["train", "--corpus", str(TINY), "--config", str(config), "--out", str(tmp_path / "m.json")])

    assert code == 2
    err = _error_line(capsys)
    assert err["error"] == "InvalidFileError"
    assert "invalid JSON" in err["message"]


def test_bad_k_list_is_a_usage_error():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["eval-sgg", "--ckpt", "c", "--corpus", "x", "--noise", "n", "--k", "50,a"])
    assert cli.build_parser().parse_args(
        ["eval-sgg", "--ckpt", "c", "--corpus", "x", "--noise", "n", "--k", "20,50"]).k == [20, 50]


# ---------- eval-mask ----------

def test_eval_mask_with_truth_copying_model(monkeypatch, capsys):
    monkeypatch.setattr(cli, "load_checkpoint", lambda path: SimpleNamespace(model=TruthCopier(_tiny_vocab())))

    assert cli.main(["eval-mask", "--ckpt", "stub", "--corpus", str(TINY), "--rate", "0.5"]) == 0
    out = _stdout_json(capsys)
    assert (out["entity"], out["predicate"], out["both"]) == (1.0, 1.0, 1.0)


def test_train_and_eval_mask_are_deterministic(tmp_path, capsys):
    config = _write_config(tmp_path)
    ckpts = [tmp_path / "a.ckpt.json", tmp_path / "b.ckpt.json"]
    for ckpt in ckpts:
        assert cli.main(["train", "--corpus", str(TINY), "--config", str(config), "--seed", "1",
                         "--out", str(ckpt)]) == 0
    assert ckpts[0].read_bytes() == ckpts[1].read_bytes()
    capsys.readouterr()

    reports = []
    for _ in range(2):
        assert cli.main(["eval-mask", "--ckpt", str(ckpts[0]), "--corpus", str(TINY), "--seed", "4"]) == 0
        reports.append(capsys.readouterr().out)
    assert reports[0] == reports[1]
    assert 0.0 <= json.loads(reports[0])["both"] <= 1.0


# ---------- fuse ----------

def _scored_stream(path, vocab, seed, n=3):
    io = CorpusJsonlIO(vocab)
    graphs = io.load(TINY)[:n]
    rng = np.random.default_rng(seed)
    scored = []
    for g in graphs:
        widths = [vocab.num_entities] * g.num_entities + [vocab.num_predicates] * g.num_predicates
        scored.append(ScoredGraph.from_logits(g, [rng.normal(size=w) for w in widths]))
    io.save_scored(scored, path)
    return scored


def test_fuse_writes_fused_stream_with_provenance(tmp_path, capsys):
    vocab = _tiny_vocab()
    _scored_stream(tmp_path / "p.jsonl", vocab, seed=0)
    _scored_stream(tmp_path / "c.jsonl", vocab, seed=1)
    out = tmp_path / "f.jsonl"

    assert cli.main(["fuse", "--perception", str(tmp_path / "p.jsonl"), "--commonsense", str(tmp_path / "c.jsonl"),
                     "--vocab", str(TINY_VOCAB), "--out", str(out)]) == 0
    report = _stdout_json(capsys)
    assert report["graphs"] == 3
    assert sum(report["provenance"].values()) == 5 + 4 + 7

    fused = CorpusJsonlIO(vocab).load_scored(out)
    assert [g.graph.num_nodes for g in fused] == [5, 4, 7]


def test_fuse_rejects_streams_of_different_length(tmp_path, capsys):
    vocab = _tiny_vocab()
    _scored_stream(tmp_path / "p.jsonl", vocab, seed=0, n=3)
    _scored_stream(tmp_path / "c.jsonl", vocab, seed=1, n=2)

    code = cli.main(["fuse", "--perception", str(tmp_path / "p.jsonl"), "--commonsense", str(tmp_path / "c.jsonl"),
                     "--vocab", str(TINY_VOCAB), "--out", str(tmp_path / "f.jsonl")])
    assert code == 2
    assert "Stream lengths differ" in _error_line(capsys)["message"]


# ---------- stats ----------

def test_stats_reports_template_fillers(monkeypatch, capsys):
    monkeypatch.setattr(cli, "load_checkpoint", lambda path: SimpleNamespace(model=TruthCopier(_tiny_vocab())))

    assert cli.main(["stats", "--ckpt", "stub", "--corpus", str(TINY), "--template", "person [X] horse"]) == 0
    rows = _stdout_json(capsys)["rows"]
    fillers = {(r["source"], r["filler"]): r["count"] for r in rows}
    assert fillers == {("input", "riding"): 2, ("input", "watching"): 1,
                       ("commonsense", "riding"): 2, ("commonsense", "watching"): 1}


def test_stats_unknown_class_in_template(monkeypatch, capsys):
    monkeypatch.setattr(cli, "load_checkpoint", lambda path: SimpleNamespace(model=TruthCopier(_tiny_vocab())))

    assert cli.main(["stats", "--ckpt", "stub", "--corpus", str(TINY), "--template", "person [X] unicorn"]) == 1
    assert _error_line(capsys)["error"] == "KeyError"
