from __future__ import annotations

import functools
import logging
import math
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, Optional, TypeVar

import click

from sketchlu.core.exceptions import ConfigError, exit_code_for
from sketchlu.models.dataset import Dataset
from sketchlu.models.run_config import DataConfig
from sketchlu.repositories.idx_repo import load_idx
from sketchlu.services.data_service import rotate_images, two_gaussian_task

logger = logging.getLogger("sketchlu.commands.common")

F = TypeVar("F", bound=Callable[..., Any])


# -------------------------------
# Error -> exit code
# -------------------------------


def exit_on_error(func: F) -> F:
    """
    Run a command body and turn known failures into exit codes.

    - 2: config / validation / file format
    - 3: training divergence
    - 4: numerical failure
    Unexpected exceptions are logged and propagate.
    """

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            code = exit_code_for(exc)
            if code is None:
                logger.exception("Command failed unexpectedly", extra={"command": func.__name__})
                raise
            logger.error(
                "Command failed",
                extra={"command": func.__name__, "error": type(exc).__name__, "exit_code": code},
            )
            click.echo(f"error: {exc}", err=True)
            sys.exit(code)

    return wrapper  # type: ignore[return-value]


# -------------------------------
# Timings
# -------------------------------


class StageTimer:
    """Wall-clock seconds per named stage, in insertion order."""

    def __init__(self) -> None:
        self.timings: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - start
            logger.info("Stage finished", extra={"stage": name, "latency_ms": int(self.timings[name] * 1000)})


def sidecar(path: Path, suffix: str) -> Path:
    """`out.csv` -> `out.<suffix>` next to it."""
    return path.with_name(f"{path.stem}.{suffix}")


# -------------------------------
# Dataset resolution
# -------------------------------


def _synthetic(cfg: DataConfig) -> Dict[str, Dataset]:
    id_train, id_test, ood_test = two_gaussian_task(
        d=cfg.d, n=cfg.n, shift=cfg.shift, seed=cfg.data_seed, separation=cfg.separation
    )
    return {"id_train": id_train, "id_test": id_test, "ood_test": ood_test}


def train_dataset(cfg: DataConfig) -> Dataset:
    if cfg.data_source == "two_gaussian":
        return _synthetic(cfg)["id_train"]
    images = cfg.train_images or cfg.images
    labels = cfg.train_labels if cfg.train_images else cfg.labels
    return load_idx(_existing(images, "--train-images" if cfg.train_images else "--images"), labels, name="id_train")


def test_datasets(cfg: DataConfig) -> Dict[str, Optional[Dataset]]:
    """{"id_test": ..., "ood_test": ...}; ood_test is None when no OoD source is configured."""
    if cfg.data_source == "two_gaussian":
        sets = _synthetic(cfg)
        return {"id_test": sets["id_test"], "ood_test": sets["ood_test"]}

    id_test = load_idx(_existing(cfg.images, "--images"), cfg.labels, name="id_test")
    ood_test: Optional[Dataset] = None
    if cfg.ood_images:
        ood_test = load_idx(_existing(cfg.ood_images, "--ood-images"), cfg.ood_labels, name="ood_test")
    elif cfg.rotate:
        side = math.isqrt(id_test.d)
        ood_test = rotate_images(id_test, cfg.rotate, side)
        ood_test = ood_test.model_copy(update={"name": "ood_test"})
    return {"id_test": id_test, "ood_test": ood_test}


def _existing(path: Optional[str], flag: str) -> str:
    if not path or not Path(path).is_file():
        raise ConfigError(f"{flag} file not found: {path}")
    return path


# -------------------------------
# Shared click options
# -------------------------------


def config_option(func: F) -> F:
    return click.option(
        "--config",
        "config_path",
        type=str,
        default=None,
        help="YAML config file (a command section, or a report JSON to re-run).",
    )(func)


def data_options(func: F) -> F:
    """Dataset selection flags shared by train / precompute / score."""
    options = [
        click.option("--data-source", type=click.Choice(["two_gaussian", "idx"]), default=None),
        click.option("--d", type=int, default=None, help="Input dimension of the synthetic task."),
        click.option("--n", type=int, default=None, help="Training points of the synthetic task."),
        click.option("--shift", type=float, default=None, help="OoD displacement of the synthetic task."),
        click.option("--separation", type=float, default=None),
        click.option("--data-seed", type=int, default=None),
        click.option("--images", type=str, default=None, help="IDX images (ID test set)."),
        click.option("--labels", type=str, default=None),
        click.option("--ood-images", type=str, default=None),
        click.option("--ood-labels", type=str, default=None),
        click.option("--train-images", type=str, default=None),
        click.option("--train-labels", type=str, default=None),
        click.option("--rotate", type=float, default=None, help="Rotate ID images by this many degrees for OoD."),
    ]
    for option in reversed(options):
        func = option(func)
    return func
