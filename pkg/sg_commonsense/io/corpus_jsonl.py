from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, List, Optional, Tuple

import numpy as np
import polars as pl
from loguru import logger

from sg_commonsense.errors import CorpusLoadError
from sg_commonsense.findings import blocking, concat_findings, empty_findings, finding
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.scene_graph import EntityNode, PredicateNode, SceneGraph, Vocabulary


ENTITY_KEYS = {"class", "box"}
PREDICATE_KEYS = {"class", "subject", "object"}
GRAPH_KEYS = {"entities", "predicates", "logits", "provenance"}


class CorpusJsonlIO:
    """
    JSONL scene-graph corpus loader / writer with line-level structural checks.

    One graph per line:
        {"entities":[{"class":"person","box":[...]}, ...],
         "predicates":[{"class":"riding","subject":0,"object":1}, ...]}

    Scored graphs add "logits" (one vector per node, joint order) and may carry a
    per-node "provenance" list. Class names resolve against a Vocabulary.

    Design goals:
    - Best-effort parsing: every problem becomes a finding with its line number.
    - `load` is strict: the first HIGH/CRIT finding raises CorpusLoadError.
    - Writing is canonical (sorted keys, compact separators) so identical graphs
      give byte-identical files.
    """

    def __init__(self, vocab: Optional[Vocabulary] = None, *, finding_type: str = "GRAPH"):
        self.vocab = vocab
        self.finding_type = finding_type

    # ---------- Findings helpers ----------

    def finding(
        self,
        rule_id: str,
        severity: str,
        field: str,
        message: str,
        *,
        row_index: int = -1,
        evidence: str = "",
    ) -> pl.DataFrame:
        return finding(self.finding_type, rule_id, severity, field, message, row_index=row_index, evidence=evidence)

    def _require_vocab(self) -> Vocabulary:
        if self.vocab is None:
            raise CorpusLoadError("A vocabulary is required to resolve class names")
        return self.vocab

    # ---------- Vocabulary ----------

    def validate_vocabulary(self, doc: Any) -> pl.DataFrame:
        findings: List[pl.DataFrame] = []
        if not isinstance(doc, dict):
            return finding("VOCAB", "VOCAB_000", "CRIT", "*", "Vocabulary must be a JSON object.",
                           evidence=type(doc).__name__)
        for key in ("entity_classes", "predicate_classes"):
            names = doc.get(key)
            if not isinstance(names, list) or any(not isinstance(n, str) for n in names):
                findings.append(finding("VOCAB", "VOCAB_000", "CRIT", key, f"{key} must be a list of strings."))
                continue
            if not names:
                findings.append(finding("VOCAB", "VOCAB_002", "CRIT", key, f"{key} must not be empty."))
            dupes = sorted({n for n in names if names.count(n) > 1})
            if dupes:
                findings.append(finding("VOCAB", "VOCAB_001", "CRIT", key, "Duplicate class names.",
                                        evidence=";".join(dupes)))
        return concat_findings(findings)

    def load_vocabulary(self, path: str | Path) -> Vocabulary:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"Vocabulary file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusLoadError(f"{p}: invalid JSON ({exc.msg})") from exc
        hard = blocking(self.validate_vocabulary(doc))
        if hard.height > 0:
            row = hard.row(0, named=True)
            raise CorpusLoadError(f"{p}: {row['rule_id']} {row['field']}: {row['message']} {row['evidence']}".rstrip())
        self.vocab = Vocabulary.from_dict(doc)
        logger.info("Loaded vocabulary {}: {} entity / {} predicate classes",
                    p, self.vocab.num_entities, self.vocab.num_predicates)
        return self.vocab

    def save_vocabulary(self, path: str | Path, vocab: Optional[Vocabulary] = None) -> None:
        vocab = vocab or self._require_vocab()
        Path(path).write_text(json.dumps(vocab.to_dict(), indent=2) + "\n", encoding="utf-8")

    # ---------- Record conversion ----------

    def graph_to_record(self, g: SceneGraph) -> dict[str, Any]:
        vocab = self._require_vocab()
        entities = []
        for e in g.entities:
            rec: dict[str, Any] = {"class": vocab.entity_classes[e.class_id]}
            if e.box is not None:
                rec["box"] = list(e.box)
            entities.append(rec)
        return {
            "entities": entities,
            "predicates": [
                {"class": vocab.predicate_classes[p.class_id], "subject": p.subject, "object": p.object}
                for p in g.predicates
            ],
        }

    def record_to_graph(self, record: Any, *, line: int = -1) -> Tuple[Optional[SceneGraph], pl.DataFrame]:
        """Convert one parsed record. Returns (graph or None, findings)."""
        vocab = self._require_vocab()
        f: List[pl.DataFrame] = []

        if not isinstance(record, dict):
            return None, self.finding("SG_001", "CRIT", "*", "Each line must be a JSON object.",
                                      row_index=line, evidence=type(record).__name__)

        unknown = sorted(k for k in record if k not in GRAPH_KEYS)
        if unknown:
            f.append(self.finding("SG_008", "LOW", "*", "Unknown top-level keys ignored.",
                                  row_index=line, evidence=";".join(unknown)))

        ents, preds = record.get("entities"), record.get("predicates", [])
        if not isinstance(ents, list) or not isinstance(preds, list):
            f.append(self.finding("SG_002", "CRIT", "entities/predicates",
                                  "'entities' and 'predicates' must be arrays.", row_index=line))
            return None, concat_findings(f)

        entities: List[EntityNode] = []
        for i, e in enumerate(ents):
            field = f"entities[{i}]"
            if not isinstance(e, dict) or not isinstance(e.get("class"), str):
                f.append(self.finding("SG_003", "CRIT", field, "Entity must be an object with a string 'class'.",
                                      row_index=line, evidence=str(e)))
                continue
            if not vocab.has_entity(e["class"]):
                f.append(self.finding("SG_004", "HIGH", f"{field}.class", f"Unknown entity class {e['class']!r}.",
                                      row_index=line, evidence=e["class"]))
                continue
            box = e.get("box")
            if box is not None and (
                not isinstance(box, list) or len(box) != 4
                or any(isinstance(b, bool) or not isinstance(b, (int, float)) or not 0.0 <= b <= 1.0 for b in box)
            ):
                f.append(self.finding("SG_006", "HIGH", f"{field}.box", "Box must be 4 numbers in [0,1].",
                                      row_index=line, evidence=str(box)))
                continue
            entities.append(EntityNode(vocab.entity_id(e["class"]), None if box is None else tuple(box)))

        predicates: List[PredicateNode] = []
        for j, p in enumerate(preds):
            field = f"predicates[{j}]"
            if not isinstance(p, dict) or not isinstance(p.get("class"), str):
                f.append(self.finding("SG_003", "CRIT", field, "Predicate must be an object with a string 'class'.",
                                      row_index=line, evidence=str(p)))
                continue
            if not vocab.has_predicate(p["class"]):
                f.append(self.finding("SG_005", "HIGH", f"{field}.class", f"Unknown predicate class {p['class']!r}.",
                                      row_index=line, evidence=p["class"]))
                continue
            s, o = p.get("subject"), p.get("object")
            valid = all(isinstance(x, int) and not isinstance(x, bool) and 0 <= x < len(ents) for x in (s, o))
            if not valid or s == o:
                f.append(self.finding("SG_007", "HIGH", field,
                                      "subject/object must be distinct indices into 'entities'.",
                                      row_index=line, evidence=f"subject={s} object={o}"))
                continue
            predicates.append(PredicateNode(vocab.predicate_id(p["class"]), s, o))

        findings = concat_findings(f)
        if blocking(findings).height > 0:
            return None, findings
        return SceneGraph(tuple(entities), tuple(predicates)), findings

    # ---------- Scored graphs ----------

    def scored_to_record(self, sg: ScoredGraph, *, provenance: Optional[List[str]] = None) -> dict[str, Any]:
        rec = self.graph_to_record(sg.graph)
        rec["logits"] = [[float(x) for x in v] for v in sg.node_logits]
        if provenance is not None:
            rec["provenance"] = list(provenance)
        return rec

    def record_to_scored(self, record: Any, *, line: int = -1) -> Tuple[Optional[ScoredGraph], pl.DataFrame]:
        vocab = self._require_vocab()
        g, f = self.record_to_graph(record, line=line)
        if g is None:
            return None, f
        logits = record.get("logits")
        widths = [vocab.num_entities] * g.num_entities + [vocab.num_predicates] * g.num_predicates
        if not isinstance(logits, list) or len(logits) != len(widths) or any(
            not isinstance(v, list) or len(v) != w for v, w in zip(logits, widths)
        ):
            return None, concat_findings([f, self.finding(
                "SG_020", "HIGH", "logits",
                "Scored graphs need one logit vector per node, entity width |C_e|, predicate width |C_p|.",
                row_index=line,
            )])
        # class ids of the record are the argmax of its logits by construction
        return ScoredGraph.from_logits(g, [np.asarray(v, dtype=np.float64) for v in logits]), f

    # ---------- IO ----------

    def iter_records(self, path: str | Path) -> Iterable[Tuple[int, Any, pl.DataFrame]]:
        """Yield (line number, parsed record or None, findings) for every non-blank line."""
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"Corpus file not found: {p}")
        with p.open("r", encoding="utf-8") as fh:
            for line_no, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    yield line_no, json.loads(text), empty_findings()
                except json.JSONDecodeError as exc:
                    yield line_no, None, self.finding("SG_000", "CRIT", "*", f"Invalid JSON: {exc.msg}.",
                                                      row_index=line_no, evidence=text.strip()[:80])

    def read(self, path: str | Path, *, scored: bool = False) -> Tuple[list, pl.DataFrame]:
        """Best-effort read: every parsable graph plus all findings."""
        graphs: list = []
        parts: List[pl.DataFrame] = []
        convert = self.record_to_scored if scored else self.record_to_graph
        for line_no, record, f in self.iter_records(path):
            parts.append(f)
            if record is None:
                continue
            g, f2 = convert(record, line=line_no)
            parts.append(f2)
            if g is not None:
                graphs.append(g)
        return graphs, concat_findings(parts)

    def load(self, path: str | Path, *, scored: bool = False) -> list:
        """Strict read: raise CorpusLoadError naming the line of the first blocking finding."""
        convert = self.record_to_scored if scored else self.record_to_graph
        graphs: list = []
        for line_no, record, f in self.iter_records(path):
            g = None
            if record is not None:
                g, f2 = convert(record, line=line_no)
                f = concat_findings([f, f2])
            self._raise_first_blocking(f, line_no)
            for row in f.iter_rows(named=True):
                logger.warning("line {}: {} {}: {}", line_no, row["rule_id"], row["field"], row["message"])
            graphs.append(g)
        logger.info("Loaded {} {}graphs from {}", len(graphs), "scored " if scored else "", path)
        return graphs

    def load_scored(self, path: str | Path) -> List[ScoredGraph]:
        return self.load(path, scored=True)

    @staticmethod
    def _raise_first_blocking(findings: pl.DataFrame, line_no: int) -> None:
        hard = blocking(findings)
        if hard.height > 0:
            row = hard.row(0, named=True)
            raise CorpusLoadError(
                f"{row['rule_id']} {row['field']}: {row['message']}", line=line_no, evidence=row["evidence"]
            )

    def _write_lines(self, records: Iterable[dict], path: str | Path) -> int:
        p = Path(path)
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        n = 0
        with p.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
                n += 1
        return n

    def save(self, graphs: Iterable[SceneGraph], path: str | Path) -> None:
        n = self._write_lines((self.graph_to_record(g) for g in graphs), path)
        logger.info("Wrote {} graphs to {}", n, path)

    def save_scored(
        self,
        graphs: Iterable[ScoredGraph],
        path: str | Path,
        *,
        provenance: Optional[Iterable[List[str]]] = None,
    ) -> None:
        graphs = list(graphs)
        tags = list(provenance) if provenance is not None else [None] * len(graphs)
        n = self._write_lines((self.scored_to_record(g, provenance=t) for g, t in zip(graphs, tags)), path)
        logger.info("Wrote {} scored graphs to {}", n, path)
