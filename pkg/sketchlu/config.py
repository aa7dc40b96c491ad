from __future__ import annotations

import logging
import os
from functools import lru_cache

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from sketchlu.logging_config import setup_logging

logger = logging.getLogger("sketchlu.config")

# -------------------------------
# Logging setup (process-wide)
# -------------------------------


def _configure_logging(log_level: str) -> None:
    """
    Configure root logging once, with timestamps.

    - Every command imports settings first, so logging is ready before any
      Lanczos run or file write is reported.
    - Re-configuration only adjusts the level; handlers are never duplicated.
    """
    level = getattr(logging, (log_level or "INFO").upper(), logging.INFO)
    setup_logging(level=level)


# -------------------------------
# Settings (Pydantic v2)
# -------------------------------


class Settings(BaseSettings):
    """
    Process-level configuration for sketchlu.

    Loaded from:
    - .env in the working directory
    - real environment variables

    Run parameters (k, s, seeds, paths) are NOT here; they live in the
    per-command run configs so they can be serialized into reports.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
        case_sensitive=False,
    )

    # -------------------------------
    # App
    # -------------------------------

    log_level: str = Field(default="INFO", alias="LOG_LEVEL")

    output_dir: str = Field(default="runs", alias="SKETCHLU_OUTPUT_DIR")

    # -------------------------------
    # Execution
    # -------------------------------

    # joblib workers for independent grid cells; 1 keeps everything in-process
    n_jobs: int = Field(default=1, ge=1, alias="SKETCHLU_N_JOBS")

    show_progress: bool = Field(default=False, alias="SKETCHLU_SHOW_PROGRESS")

    ggn_batch_size: int = Field(default=256, ge=1, alias="SKETCHLU_BATCH_SIZE")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """
    Returns a cached Settings instance.

    Parsing/validation happens once per process; logging is configured as
    soon as the level is known.
    """
    try:
        settings = Settings()

        _configure_logging(settings.log_level)

        logger.debug(
            "Settings loaded",
            extra={
                "LOG_LEVEL": settings.log_level,
                "SKETCHLU_OUTPUT_DIR": settings.output_dir,
                "SKETCHLU_N_JOBS": settings.n_jobs,
                "SKETCHLU_SHOW_PROGRESS": settings.show_progress,
                "SKETCHLU_BATCH_SIZE": settings.ggn_batch_size,
            },
        )

        return settings

    except ValidationError:
        _configure_logging(os.getenv("LOG_LEVEL", "INFO"))
        logger.exception("Settings validation error")
        raise
