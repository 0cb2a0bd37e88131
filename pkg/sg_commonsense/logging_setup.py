from __future__ import annotations

import sys

from loguru import logger

DEFAULT_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function} - {message}"


def configure_logging(level: str = "INFO", *, json_logs: bool = False) -> None:
    """Install a single stderr sink. Primary outputs never go through the logger."""
    logger.remove()
    if json_logs:
        logger.add(sys.stderr, level=level.upper(), serialize=True)
    else:
        logger.add(sys.stderr, level=level.upper(), format=DEFAULT_FORMAT)
