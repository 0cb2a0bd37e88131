"""Exception hierarchy shared by every module of the toolkit."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    import polars as pl


class SgCommonsenseError(Exception):
    """Base class for all toolkit errors."""


class StructureError(SgCommonsenseError, ValueError):
    """A scene graph violates a structural invariant."""


class ContractError(SgCommonsenseError, ValueError):
    """A tensor operation or API call received incompatible arguments."""


class CorpusLoadError(SgCommonsenseError, ValueError):
    def __init__(self, message: str, *, line: int = -1, evidence: str = ""):
        self.line = line
        self.evidence = evidence
        prefix = f"line {line}: " if line >= 0 else ""
        super().__init__(f"{prefix}{message}")


class ConfigError(SgCommonsenseError, ValueError):
    def __init__(self, message: str, findings: "pl.DataFrame | None" = None):
        self.findings = findings
        super().__init__(message)


class CheckpointError(SgCommonsenseError, ValueError):
    """Checkpoint file is malformed or inconsistent with its own config."""


class WorldNotEnumerableError(SgCommonsenseError, ValueError):
    """Exact ceilings are not available for this world model."""


class TrainingDivergedError(SgCommonsenseError, RuntimeError):
    """Loss became NaN or infinite."""


class InvalidFileError(SgCommonsenseError, ValueError):
    """A file exists but its contents cannot be parsed."""
