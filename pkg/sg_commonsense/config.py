"""
Configuration block validators.

Every JSON configuration block (model, training, finetune, evaluation, noise,
world) is checked here before it is turned into a dataclass. Each validator
returns a findings table; `load_block` raises ConfigError on the first
HIGH/CRIT finding so the CLI can exit with the configuration status code.

Rule ids:
  CFG_000  block is not a JSON object
  CFG_001  unknown key
  CFG_002  wrong type
  CFG_003  value out of range
  CFG_004  inconsistent combination of values
  CFG_1xx  world-specific rules
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable

import polars as pl

from sg_commonsense.errors import ConfigError, InvalidFileError
from sg_commonsense.findings import concat_findings, empty_findings, finding, raise_on_blocking


# -----------------------------
# Generic helpers
# -----------------------------

def _f(block: str, rule_id: str, key: str, message: str, evidence: Any = "", severity: str = "CRIT") -> pl.DataFrame:
    return finding("CONFIG", rule_id, severity, f"{block}.{key}", message, evidence=str(evidence))


def _unknown_keys(block: str, doc: dict, allowed: set[str]) -> list[pl.DataFrame]:
    return [
        _f(block, "CFG_001", k, f"Unknown key {k!r}; allowed: {sorted(allowed)}.", k, severity="HIGH")
        for k in doc if k not in allowed
    ]


def _number(block: str, doc: dict, key: str, *, integer: bool = False,
            lo: float | None = None, hi: float | None = None,
            lo_open: bool = False, hi_open: bool = False) -> list[pl.DataFrame]:
    if key not in doc:
        return []
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        kind = "an integer" if integer else "a number"
        return [_f(block, "CFG_002", key, f"{key} must be {kind}.", v)]
    if lo is not None and (v < lo or (lo_open and v == lo)):
        return [_f(block, "CFG_003", key, f"{key} must be {'>' if lo_open else '>='} {lo}.", v)]
    if hi is not None and (v > hi or (hi_open and v == hi)):
        return [_f(block, "CFG_003", key, f"{key} must be {'<' if hi_open else '<='} {hi}.", v)]
    return []


def _boolean(block: str, doc: dict, key: str) -> list[pl.DataFrame]:
    if key in doc and not isinstance(doc[key], bool):
        return [_f(block, "CFG_002", key, f"{key} must be true or false.", doc[key])]
    return []


def _object(block: str, doc: Any) -> list[pl.DataFrame]:
    if not isinstance(doc, dict):
        return [_f(block, "CFG_000", "*", f"{block} block must be a JSON object.", type(doc).__name__)]
    return []


# -----------------------------
# Block validators
# -----------------------------

MODEL_KEYS = {
    "layers", "global_heads", "subject_heads", "object_heads", "model_dim", "head_dim",
    "decoder_hidden", "mask_rate", "residual", "fixed_attention",
}


def validate_model_block(doc: Any) -> pl.DataFrame:
    base = _object("model", doc)
    if base:
        return concat_findings(base)
    parts = _unknown_keys("model", doc, MODEL_KEYS)
    for key in ("layers", "global_heads", "subject_heads", "object_heads"):
        parts += _number("model", doc, key, integer=True, lo=0)
    for key in ("model_dim", "head_dim", "decoder_hidden"):
        parts += _number("model", doc, key, integer=True, lo=1)
    parts += _number("model", doc, "mask_rate", lo=0.0, hi=1.0, lo_open=True, hi_open=True)
    parts += _boolean("model", doc, "residual")
    parts += _boolean("model", doc, "fixed_attention")

    heads = [doc.get(k) for k in ("global_heads", "subject_heads", "object_heads")]
    if all(isinstance(h, int) for h in heads if h is not None) and any(h is not None for h in heads):
        if sum(h or 0 for h in heads) == 0 and all(h is not None for h in heads):
            parts.append(_f("model", "CFG_004", "heads", "At least one attention head is required.", heads))
    if doc.get("fixed_attention") and doc.get("global_heads", 0):
        parts.append(_f("model", "CFG_004", "fixed_attention",
                        "fixed_attention applies to local heads only; global_heads must be 0.",
                        doc.get("global_heads")))
    return concat_findings(parts)


TRAINING_KEYS = {
    "epochs", "learning_rate", "beta1", "beta2", "eps", "accumulation",
    "validation_fraction", "node_loss_weight", "edge_loss_weight",
}


def validate_training_block(doc: Any) -> pl.DataFrame:
    base = _object("training", doc)
    if base:
        return concat_findings(base)
    parts = _unknown_keys("training", doc, TRAINING_KEYS)
    parts += _number("training", doc, "epochs", integer=True, lo=0)
    parts += _number("training", doc, "accumulation", integer=True, lo=1)
    parts += _number("training", doc, "learning_rate", lo=0.0, lo_open=True)
    parts += _number("training", doc, "beta1", lo=0.0, hi=1.0, hi_open=True)
    parts += _number("training", doc, "beta2", lo=0.0, hi=1.0, hi_open=True)
    parts += _number("training", doc, "eps", lo=0.0, lo_open=True)
    parts += _number("training", doc, "validation_fraction", lo=0.0, hi=1.0, hi_open=True)
    parts += _number("training", doc, "node_loss_weight", lo=0.0)
    parts += _number("training", doc, "edge_loss_weight", lo=0.0)
    return concat_findings(parts)


FINETUNE_KEYS = {"epochs", "learning_rate", "prune_k", "freeze_encoder"}


def validate_finetune_block(doc: Any) -> pl.DataFrame:
    base = _object("finetune", doc)
    if base:
        return concat_findings(base)
    parts = _unknown_keys("finetune", doc, FINETUNE_KEYS)
    parts += _number("finetune", doc, "epochs", integer=True, lo=0)
    parts += _number("finetune", doc, "learning_rate", lo=0.0, lo_open=True)
    parts += _number("finetune", doc, "prune_k", integer=True, lo=0)
    parts += _boolean("finetune", doc, "freeze_encoder")
    return concat_findings(parts)


EVALUATION_KEYS = {"test_fraction", "mask_rate", "ks", "graph_constraint", "bin_average"}


def validate_evaluation_block(doc: Any) -> pl.DataFrame:
    base = _object("evaluation", doc)
    if base:
        return concat_findings(base)
    parts = _unknown_keys("evaluation", doc, EVALUATION_KEYS)
    parts += _number("evaluation", doc, "test_fraction", lo=0.0, hi=1.0, lo_open=True, hi_open=True)
    parts += _number("evaluation", doc, "mask_rate", lo=0.0, hi=1.0, lo_open=True, hi_open=True)
    parts += _boolean("evaluation", doc, "graph_constraint")
    ks = doc.get("ks")
    if ks is not None and (not isinstance(ks, list) or not ks
                           or any(isinstance(k, bool) or not isinstance(k, int) or k <= 0 for k in ks)):
        parts.append(_f("evaluation", "CFG_003", "ks", "ks must be a non-empty list of positive integers.", ks))
    if doc.get("bin_average", "image") not in ("image", "instance"):
        parts.append(_f("evaluation", "CFG_003", "bin_average", "bin_average must be 'image' or 'instance'.",
                        doc.get("bin_average")))
    return concat_findings(parts)


NOISE_KEYS = {"corruption_rate", "confusion", "temperature_correct", "temperature_wrong", "seed"}


def validate_noise_block(doc: Any) -> pl.DataFrame:
    base = _object("noise", doc)
    if base:
        return concat_findings(base)
    parts = _unknown_keys("noise", doc, NOISE_KEYS)
    parts += _number("noise", doc, "corruption_rate", lo=0.0, hi=1.0)
    parts += _number("noise", doc, "temperature_correct", lo=0.0, lo_open=True)
    parts += _number("noise", doc, "temperature_wrong", lo=0.0, lo_open=True)
    parts += _number("noise", doc, "seed", integer=True, lo=0)

    confusion = doc.get("confusion", {})
    if not isinstance(confusion, dict) or any(k not in ("entity", "predicate") for k in confusion):
        parts.append(_f("noise", "CFG_002", "confusion",
                        "confusion must map 'entity'/'predicate' to {class: {wrong_class: prob}}.", confusion))
        return concat_findings(parts)
    for kind, rows in confusion.items():
        if not isinstance(rows, dict):
            parts.append(_f("noise", "CFG_002", f"confusion.{kind}", "Expected an object of rows.", rows))
            continue
        for cls, dist in rows.items():
            parts += _distribution("noise", f"confusion.{kind}.{cls}", dist)
            if isinstance(dist, dict) and cls in dist:
                parts.append(_f("noise", "CFG_004", f"confusion.{kind}.{cls}",
                                "A confusion row may not contain its own class.", cls))
    return concat_findings(parts)


def _distribution(block: str, key: str, dist: Any) -> list[pl.DataFrame]:
    if not isinstance(dist, dict) or not dist:
        return [_f(block, "CFG_002", key, "Expected a non-empty {class: probability} object.", dist)]
    values = list(dist.values())
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0 for v in values):
        return [_f(block, "CFG_003", key, "Probabilities must be non-negative numbers.", values)]
    if abs(sum(values) - 1.0) > 1e-9:
        return [_f(block, "CFG_003", key, "Probabilities must sum to 1.", sum(values))]
    return []


def validate_world_block(doc: Any) -> pl.DataFrame:
    base = _object("world", doc)
    if base:
        return concat_findings(base)
    parts: list[pl.DataFrame] = []
    for key in ("entity_classes", "predicate_classes", "rules"):
        if not isinstance(doc.get(key), list) or not doc.get(key):
            parts.append(_f("world", "CFG_100", key, f"{key} must be a non-empty list.", doc.get(key)))
    if parts:
        return concat_findings(parts)

    entities, predicates = set(doc["entity_classes"]), set(doc["predicate_classes"])
    base_pairs: set[tuple[str, str]] = set()

    for i, rule in enumerate(doc["rules"]):
        key = f"rules[{i}]"
        if not isinstance(rule, dict):
            parts.append(_f("world", "CFG_101", key, "Rule must be an object.", rule))
            continue
        s, o = rule.get("subject"), rule.get("object")
        if s not in entities or o not in entities:
            parts.append(_f("world", "CFG_102", key, "Rule subject/object must be declared entity classes.", (s, o)))
        if (s, o) in base_pairs:
            parts.append(_f("world", "CFG_103", key, "Duplicate base rule for pair.", (s, o)))
        base_pairs.add((s, o))
        parts += _number("world", rule, "weight", lo=0.0, lo_open=True)
        parts += _distribution("world", f"{key}.predicates", rule.get("predicates"))
        parts += _unknown_classes(key, rule.get("predicates"), predicates)

    for i, ctx in enumerate(doc.get("context", [])):
        key = f"context[{i}]"
        if not isinstance(ctx, dict):
            parts.append(_f("world", "CFG_101", key, "Context rule must be an object.", ctx))
            continue
        if ctx.get("trigger") not in entities:
            parts.append(_f("world", "CFG_102", key, "Context trigger must be a declared entity class.",
                            ctx.get("trigger")))
        if (ctx.get("subject"), ctx.get("object")) not in base_pairs:
            parts.append(_f("world", "CFG_104", key, "Every context rule needs a base rule for its pair.",
                            (ctx.get("subject"), ctx.get("object"))))
        parts += _distribution("world", f"{key}.predicates", ctx.get("predicates"))
        parts += _unknown_classes(key, ctx.get("predicates"), predicates)

    for key in ("scenery", "fillers"):
        block = doc.get(key, {})
        if not isinstance(block, dict) or any(c not in entities for c in block):
            parts.append(_f("world", "CFG_102", key, f"{key} must map declared entity classes to numbers.", block))
            continue
        for cls, v in block.items():
            hi = 1.0 if key == "scenery" else None
            parts += _number("world", block, cls, lo=0.0, hi=hi)

    sizes = doc.get("sizes", {})
    for key in ("predicates", "extra_fillers"):
        rng = sizes.get(key)
        if rng is not None and (not isinstance(rng, list) or len(rng) != 2
                                or any(not isinstance(x, int) or x < 0 for x in rng) or rng[0] > rng[1]):
            parts.append(_f("world", "CFG_105", f"sizes.{key}", "Expected [lo, hi] with 0 <= lo <= hi.", rng))
    parts += _number("world", sizes, "min_entities", integer=True, lo=0)
    parts += _number("world", sizes, "reuse_prob", lo=0.0, hi=1.0)
    parts += _number("world", doc, "seed", integer=True, lo=0)
    return concat_findings(parts)


def _unknown_classes(key: str, dist: Any, predicates: set[str]) -> list[pl.DataFrame]:
    if not isinstance(dist, dict):
        return []
    unknown = sorted(p for p in dist if p not in predicates)
    if unknown:
        return [_f("world", "CFG_102", f"{key}.predicates", "Unknown predicate classes.", unknown)]
    return []


# -----------------------------
# Loading
# -----------------------------

def load_json(path: str | Path) -> Any:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Config file not found: {p}")
    with p.open("r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidFileError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def load_block(doc: Any, validator: Callable[[Any], pl.DataFrame]) -> dict:
    """Run a block validator; raise ConfigError on blocking findings, else return the block."""
    findings = validator(doc) if doc is not None else empty_findings()

    def make_error(row: dict) -> ConfigError:
        return ConfigError(f"{row['rule_id']} {row['field']}: {row['message']} (got {row['evidence']})", findings)

    raise_on_blocking(findings, make_error)
    return dict(doc or {})
