from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, List, Optional

import click
import numpy as np
import pandas as pd

from sketchlu.commands.common import (
    StageTimer,
    config_option,
    data_options,
    exit_on_error,
    sidecar,
    train_dataset,
)
from sketchlu.config import Settings, get_settings
from sketchlu.core.exceptions import ConfigError
from sketchlu.models.mlp import LossKind, init_mlp
from sketchlu.models.run_config import TrainConfig, config_snapshot, load_run_config
from sketchlu.repositories.checkpoint_repo import CheckpointRepo
from sketchlu.repositories.report_repo import write_csv, write_json
from sketchlu.services.training_service import train_sgd

logger = logging.getLogger("sketchlu.commands.train")

TRAINING_LOG_COLUMNS = ["epoch", "loss", "accuracy"]


def cmd_train(cfg: TrainConfig, settings: Optional[Settings] = None) -> Path:
    """
    Train an MLP and write:
    - the MLPC checkpoint at cfg.out
    - <stem>.training_log.csv (epoch, loss, accuracy)
    - <stem>.json (config and dataset manifest)
    """
    settings = settings or get_settings()
    timer = StageTimer()
    with timer.stage("data"):
        data = train_dataset(cfg)
    if data.targets is None:
        raise ConfigError("training needs class labels (--labels / --train-labels)")

    loss = LossKind(cfg.loss)
    labels = data.targets.astype(np.int64)
    n_classes = int(labels.max()) + 1 if labels.size else 1
    train_data = data
    if loss is LossKind.mse:
        train_data = data.model_copy(update={"targets": np.eye(n_classes)[labels]})

    dims = (data.d, *cfg.hidden, n_classes)
    model = init_mlp(dims, cfg.activation, cfg.seed)

    log_rows: List[List[Any]] = []

    def _record(epoch: int, epoch_loss: float, accuracy: float) -> None:
        log_rows.append([epoch, epoch_loss, accuracy])

    with timer.stage("train"):
        trained = train_sgd(
            model,
            train_data,
            loss,
            epochs=cfg.epochs,
            lr=cfg.lr,
            batch=cfg.batch,
            seed=cfg.seed,
            on_epoch=_record,
            show_progress=settings.show_progress,
        )

    out = Path(cfg.out)
    CheckpointRepo().save(trained, out)
    write_csv(pd.DataFrame(log_rows, columns=TRAINING_LOG_COLUMNS), sidecar(out, "training_log.csv"))
    write_json(
        {"config": config_snapshot(cfg), "dataset": data.manifest, "layer_dims": list(dims), "p": trained.n_params},
        sidecar(out, "json"),
    )
    write_json(timer.timings, sidecar(out, "timings.json"))

    logger.info(
        "Train command finished",
        extra={"checkpoint": str(out), "p": trained.n_params, "epochs": cfg.epochs},
    )
    return out


@click.command("train")
@config_option
@data_options
@click.option("--hidden", type=int, multiple=True, help="Hidden layer width (repeat per layer).")
@click.option("--activation", type=click.Choice(["tanh", "relu"]), default=None)
@click.option("--loss", type=click.Choice(["mse", "cross_entropy"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=str, default=None, help="Checkpoint path.")
@exit_on_error
def train_command(config_path: str | None, **flags: Any) -> None:
    """Train an MLP classifier and write an MLPC checkpoint."""
    cfg = load_run_config(TrainConfig, "train", config_path, flags)
    out = cmd_train(cfg)
    click.echo(str(out))
