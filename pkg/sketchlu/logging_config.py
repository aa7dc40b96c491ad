"""
Log setup for the sketchlu CLI.

Records go to stderr so scores, reports and checkpoints written to stdout or
files stay clean. Context passed through `extra={...}` is appended to the
line as sorted key=value pairs.
"""

from __future__ import annotations

import logging
import sys
from typing import Any, Dict, Optional

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# attributes every LogRecord carries; anything else arrived via `extra=`
_RECORD_ATTRS = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


def record_fields(record: logging.LogRecord) -> Dict[str, Any]:
    """The `extra` context attached to a record."""
    return {key: value for key, value in vars(record).items() if key not in _RECORD_ATTRS}


def _render(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


class ContextFormatter(logging.Formatter):
    """Pipe-separated line with the record's context fields after the message."""

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        fields = record_fields(record)
        if not fields:
            return line
        pairs = " ".join(f"{key}={_render(value)}" for key, value in sorted(fields.items()))
        # tracebacks follow on later lines
        head, newline, rest = line.partition("\n")
        return f"{head} | {pairs}{newline}{rest}"


class CliHandler(logging.StreamHandler):
    """stderr handler owned by setup_logging."""


def setup_logging(level: int = logging.INFO, logger_name: Optional[str] = None) -> logging.Logger:
    """
    Attach one stderr handler to `logger_name` (root when None) at `level`.

    Later calls only change the level, so repeated CLI invocations in one
    process never stack handlers.
    """
    logger = logging.getLogger(logger_name)
    logger.setLevel(level)
    for handler in logger.handlers:
        if isinstance(handler, CliHandler):
            handler.setLevel(level)
            return logger

    handler = CliHandler(sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(ContextFormatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(handler)
    if logger_name is not None:
        logger.propagate = False
    return logger
