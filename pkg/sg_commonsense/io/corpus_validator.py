from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import polars as pl

from sg_commonsense.findings import blocking, concat_findings, finding
from sg_commonsense.io.corpus_jsonl import CorpusJsonlIO
from sg_commonsense.scene_graph import SceneGraph, Vocabulary, validate_graph


@dataclass
class CorpusValidationResult:
    graphs: List[SceneGraph]
    findings: pl.DataFrame

    @property
    def ok(self) -> bool:
        return blocking(self.findings).height == 0


def validate_corpus_level(graphs: List[SceneGraph], vocab: Vocabulary) -> pl.DataFrame:
    """
    CV_001 (MED): corpus is empty
    CV_002 (LOW): graph has no predicate nodes
    CV_003 (LOW): predicate class never occurs (excluded from mean recall)
    """
    parts: List[pl.DataFrame] = []
    if not graphs:
        return finding("CORPUS", "CV_001", "MED", "*", "Corpus contains no graphs.")

    for i, g in enumerate(graphs):
        if g.num_predicates == 0:
            parts.append(finding("CORPUS", "CV_002", "LOW", "predicates", "Graph has no predicate nodes.",
                                 row_index=i))

    seen = {c for g in graphs for c in g.predicate_classes()}
    missing = [vocab.predicate_classes[c] for c in range(vocab.num_predicates) if c not in seen]
    if missing:
        parts.append(finding("CORPUS", "CV_003", "LOW", "predicate_classes",
                             f"{len(missing)} predicate classes never occur.", evidence=";".join(missing)))
    return concat_findings(parts)


class CorpusValidator:
    """
    Orchestrates validation of a scene-graph corpus by:
    - running CorpusJsonlIO line-level structural checks (when reading a file)
    - checking class ids against the vocabulary for every graph
    - applying corpus-level checks
    """

    def __init__(self, vocab: Vocabulary, io: Optional[CorpusJsonlIO] = None):
        self.vocab = vocab
        self.io = io or CorpusJsonlIO(vocab)

    def validate_graphs(self, graphs: List[SceneGraph]) -> CorpusValidationResult:
        parts = [validate_graph(g, self.vocab, row_index=i) for i, g in enumerate(graphs)]
        parts.append(validate_corpus_level(graphs, self.vocab))
        return CorpusValidationResult(graphs=list(graphs), findings=concat_findings(parts))

    def validate_file(self, path: str | Path) -> CorpusValidationResult:
        graphs, structural = self.io.read(path)
        result = self.validate_graphs(graphs)
        return CorpusValidationResult(graphs=graphs, findings=concat_findings([structural, result.findings]))
