from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import polars as pl
from loguru import logger

from sg_commonsense.errors import CheckpointError, ConfigError
from sg_commonsense.findings import blocking, concat_findings, finding
from sg_commonsense.glat import GlatConfig, GlatModel, parameter_shapes
from sg_commonsense.scene_graph import Vocabulary
from sg_commonsense.tensor_engine import AdamState, parameter

FORMAT_VERSION = 1
ADAM_M, ADAM_V = "adam.m.", "adam.v."


@dataclass
class Checkpoint:
    model: GlatModel
    adam: Optional[AdamState] = None
    rng_state: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.adam.step if self.adam is not None else 0


def _ckpt_finding(rule_id: str, severity: str, field: str, message: str, evidence: str = "") -> pl.DataFrame:
    return finding("CHECKPOINT", rule_id, severity, field, message, evidence=evidence)


# ---------- Encode ----------

def _tensor_record(values: np.ndarray) -> Dict[str, Any]:
    return {"shape": list(values.shape), "data": [float(x) for x in values.ravel()]}


def checkpoint_to_dict(ckpt: Checkpoint) -> Dict[str, Any]:
    tensors = {name: _tensor_record(t.values) for name, t in ckpt.model.parameters().items()}
    if ckpt.adam is not None:
        for name in ckpt.model.parameters():
            if name in ckpt.adam.m:
                tensors[ADAM_M + name] = _tensor_record(ckpt.adam.m[name])
                tensors[ADAM_V + name] = _tensor_record(ckpt.adam.v[name])
    return {
        "format_version": FORMAT_VERSION,
        "config": {
            "model": ckpt.model.config.to_dict(),
            "vocabulary": ckpt.model.vocab.to_dict(),
            "training": ckpt.metadata,
            "state": {"step": ckpt.step, "rng": ckpt.rng_state},
        },
        "tensors": tensors,
    }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(checkpoint_to_dict(ckpt), sort_keys=True, separators=(",", ":")) + "\n",
                 encoding="utf-8")
    logger.info("Saved checkpoint {} ({} parameters, step {})", p, ckpt.model.parameter_count(), ckpt.step)


# ---------- Decode ----------

def validate_checkpoint(doc: Any, config: Optional[GlatConfig]) -> pl.DataFrame:
    """
    CKPT_000 (CRIT): not an object / unsupported format_version
    CKPT_001 (CRIT): config block missing or malformed
    CKPT_002 (CRIT): parameter tensor missing
    CKPT_003 (CRIT): tensor shape differs from the shape implied by the config
    CKPT_004 (CRIT): tensor data length differs from its declared shape
    CKPT_005 (HIGH): unexpected tensor name
    CKPT_006 (HIGH): non-finite tensor values
    """
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        version = doc.get("format_version") if isinstance(doc, dict) else type(doc).__name__
        return _ckpt_finding("CKPT_000", "CRIT", "format_version",
                             f"Expected a checkpoint object with format_version {FORMAT_VERSION}.", str(version))
    if config is None:
        return _ckpt_finding("CKPT_001", "CRIT", "config", "Checkpoint config block is missing or invalid.")

    parts: List[pl.DataFrame] = []
    tensors = doc.get("tensors") if isinstance(doc.get("tensors"), dict) else {}
    expected = {name: shape for name, (shape, _) in parameter_shapes(config).items()}
    allowed = set(expected) | {ADAM_M + n for n in expected} | {ADAM_V + n for n in expected}

    for name, rec in tensors.items():
        if name not in allowed:
            parts.append(_ckpt_finding("CKPT_005", "HIGH", name, "Unexpected tensor in checkpoint."))
            continue
        base = name[len(ADAM_M):] if name.startswith((ADAM_M, ADAM_V)) else name
        shape = tuple(rec.get("shape", [])) if isinstance(rec, dict) else ()
        data = rec.get("data", []) if isinstance(rec, dict) else []
        if shape != expected[base]:
            parts.append(_ckpt_finding("CKPT_003", "CRIT", name, "Tensor shape does not match the model config.",
                                       f"got {list(shape)} expected {list(expected[base])}"))
            continue
        if not isinstance(data, list) or len(data) != int(np.prod(shape)):
            parts.append(_ckpt_finding("CKPT_004", "CRIT", name, "Tensor data length does not match its shape.",
                                       f"len={len(data) if isinstance(data, list) else '?'}"))
            continue
        if any(not isinstance(x, (int, float)) or not math.isfinite(x) for x in data):
            parts.append(_ckpt_finding("CKPT_006", "HIGH", name, "Tensor holds non-finite values."))

    for name in expected:
        if name not in tensors:
            parts.append(_ckpt_finding("CKPT_002", "CRIT", name, "Parameter tensor missing from checkpoint."))
    return concat_findings(parts)


def checkpoint_from_dict(doc: Any, *, source: str = "checkpoint") -> Checkpoint:
    config = None
    try:
        cfg_block = doc["config"]
        vocab = Vocabulary.from_dict(cfg_block["vocabulary"])
        config = GlatConfig.from_dict(cfg_block["model"], vocab)
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        if isinstance(doc, dict) and doc.get("format_version") == FORMAT_VERSION:
            raise CheckpointError(f"{source}: invalid config block ({exc})") from exc

    hard = blocking(validate_checkpoint(doc, config))
    if hard.height > 0:
        row = hard.row(0, named=True)
        raise CheckpointError(f"{source}: {row['rule_id']} {row['field']}: {row['message']} {row['evidence']}".rstrip())

    tensors = doc["tensors"]

    def array(name: str) -> np.ndarray:
        rec = tensors[name]
        return np.asarray(rec["data"], dtype=np.float64).reshape(tuple(rec["shape"]))

    params = {name: parameter(array(name), name=name) for name in parameter_shapes(config)}
    model = GlatModel(config, vocab, params)

    state = cfg_block.get("state") or {}
    adam = None
    if any(n.startswith(ADAM_M) for n in tensors) or state.get("step"):
        adam = AdamState(step=int(state.get("step", 0)))
        for name in params:
            if ADAM_M + name in tensors:
                adam.m[name] = array(ADAM_M + name)
                adam.v[name] = array(ADAM_V + name)
    return Checkpoint(model=model, adam=adam, rng_state=state.get("rng"), metadata=dict(cfg_block.get("training") or {}))


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Checkpoint not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{p}: invalid JSON ({exc.msg})") from exc
    ckpt = checkpoint_from_dict(doc, source=str(p))
    logger.info("Loaded checkpoint {} ({} parameters, step {})", p, ckpt.model.parameter_count(), ckpt.step)
    return ckpt
