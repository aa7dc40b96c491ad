from __future__ import annotations

import logging
from typing import Optional

import click

from sketchlu import __version__
from sketchlu.commands.bench import bench_group
from sketchlu.commands.precompute import precompute_command
from sketchlu.commands.score import score_command
from sketchlu.commands.train import train_command
from sketchlu.config import get_settings
from sketchlu.logging_config import setup_logging

logger = logging.getLogger("sketchlu.main")


def create_cli() -> click.Group:
    """
    CLI factory.

    Responsibilities:
    - Load settings (and with them, logging) before any command runs
    - Register the command groups
    """

    @click.group("sketchlu")
    @click.version_option(__version__, prog_name="sketchlu")
    @click.option("--log-level", type=str, default=None, help="Overrides LOG_LEVEL for this run.")
    def cli(log_level: Optional[str]) -> None:
        """Sketched Lanczos eigenbases and SLU uncertainty scores."""
        settings = get_settings()
        if log_level:
            setup_logging(level=getattr(logging, log_level.upper(), logging.INFO))
        logger.debug("CLI started", extra={"log_level": log_level or settings.log_level})

    # ---------------------------------
    # Commands
    # ---------------------------------
    for command in (train_command, precompute_command, score_command, bench_group):
        cli.add_command(command)
        logger.debug("Command registered", extra={"command": command.name})

    return cli


cli = create_cli()


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
