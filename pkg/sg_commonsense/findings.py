"""
Findings tables.

A finding is one row describing one data problem: a bad corpus line, an
inconsistent config value, a checkpoint tensor with the wrong shape. Every
validator in the package returns a polars DataFrame with FINDINGS_SCHEMA so
results from different sources can be concatenated and written as one report.

Severities:
  - LOW / MED: reported and logged, loading continues.
  - HIGH / CRIT: loading stops; callers turn the first one into an exception.
"""

from __future__ import annotations

from typing import Callable, Iterable

import polars as pl
from loguru import logger


# -----------------------------
# Schema
# -----------------------------

FINDINGS_SCHEMA = {
    "finding_type": pl.Utf8,  # GRAPH / VOCAB / CONFIG / CHECKPOINT
    "rule_id": pl.Utf8,
    "severity": pl.Utf8,      # LOW / MED / HIGH / CRIT
    "field": pl.Utf8,
    "message": pl.Utf8,
    "row_index": pl.Int64,    # line number for corpus findings, -1 means file-level
    "evidence": pl.Utf8,      # best-effort string
}

BLOCKING_SEVERITIES = ("HIGH", "CRIT")


def empty_findings() -> pl.DataFrame:
    return pl.DataFrame(schema=FINDINGS_SCHEMA)


def finding(
    finding_type: str,
    rule_id: str,
    severity: str,
    field: str,
    message: str,
    *,
    row_index: int = -1,
    evidence: str = "",
) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "finding_type": [finding_type],
            "rule_id": [rule_id],
            "severity": [severity],
            "field": [field],
            "message": [message],
            "row_index": [row_index],
            "evidence": [evidence],
        },
        schema=FINDINGS_SCHEMA,
    )


def concat_findings(parts: Iterable[pl.DataFrame]) -> pl.DataFrame:
    parts = [p for p in parts if isinstance(p, pl.DataFrame) and p.height > 0]
    if not parts:
        return empty_findings()
    return pl.concat(parts, how="vertical_relaxed")


def blocking(findings: pl.DataFrame) -> pl.DataFrame:
    return findings.filter(pl.col("severity").is_in(BLOCKING_SEVERITIES))


def raise_on_blocking(findings: pl.DataFrame, make_error: Callable[[dict], Exception]) -> None:
    """Log non-blocking findings; raise make_error(first blocking row) if any."""
    for row in findings.filter(~pl.col("severity").is_in(BLOCKING_SEVERITIES)).iter_rows(named=True):
        logger.warning("{} {}: {}", row["rule_id"], row["field"], row["message"])

    hard = blocking(findings)
    if hard.height > 0:
        raise make_error(hard.row(0, named=True))
