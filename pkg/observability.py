"""Observability helpers: structured logging for CLI runs and worker processes.

Call `init_observability` once at process start (the CLI does this before
dispatching a subcommand; worker processes do it when they boot).
"""
from __future__ import annotations

import logging
import sys
import uuid
from contextlib import contextmanager
from typing import Iterator, Optional

import structlog
from structlog.contextvars import bind_contextvars, clear_contextvars

__all__ = [
    "init_observability",
    "run_context",
]


def _setup_logging(log_level: str, log_format: str) -> None:
    """Configure structlog for structured logging (JSON or console)."""

    # Define shared processors
    shared_processors: list[structlog.types.Processor] = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.UnicodeDecoder(),
    ]

    if log_format.lower() == "json":
        final_processor = structlog.processors.JSONRenderer()
    else:
        final_processor = structlog.dev.ConsoleRenderer(colors=False)

    structlog.configure(
        processors=shared_processors + [final_processor],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    # stderr keeps stdout free for CSV output
    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        if getattr(handler, "_spatialrisk", False):
            root_logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler._spatialrisk = True  # type: ignore[attr-defined]
    root_logger.addHandler(handler)
    root_logger.setLevel(log_level.upper())

    # Silence noisy loggers
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def init_observability(log_level: Optional[str] = None, log_format: Optional[str] = None) -> None:
    """Setup logging. Defaults come from Settings."""

    if log_level is None or log_format is None:
        from settings import get_settings

        settings = get_settings()
        log_level = log_level or settings.log_level
        log_format = log_format or settings.log_format

    _setup_logging(log_level, log_format)
    structlog.get_logger(__name__).debug("Observability initialized", log_format=log_format)


@contextmanager
def run_context(command: str, run_id: Optional[str] = None) -> Iterator[str]:
    """Bind a run id and command name to every log line emitted inside the block."""

    run_id = run_id or uuid.uuid4().hex
    clear_contextvars()
    bind_contextvars(run_id=run_id, command=command)
    try:
        yield run_id
    finally:
        clear_contextvars()
