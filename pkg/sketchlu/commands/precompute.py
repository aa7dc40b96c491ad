from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional

import click

from sketchlu.commands.common import (
    StageTimer,
    config_option,
    data_options,
    exit_on_error,
    sidecar,
    train_dataset,
)
from sketchlu.config import Settings, get_settings
from sketchlu.core.exceptions import DimensionMismatch
from sketchlu.core.sketch import sketch_new
from sketchlu.core.sketched_lanczos import SketchedBasis, derive_seed, preconditioned_sketched_lanczos
from sketchlu.models.mlp import GgnOperator, LossKind
from sketchlu.models.run_config import PrecomputeConfig, config_snapshot, load_run_config
from sketchlu.repositories.basis_repo import BasisRepo
from sketchlu.repositories.checkpoint_repo import CheckpointRepo
from sketchlu.repositories.report_repo import write_json
from sketchlu.services.data_service import subsample
from sketchlu.services.eval_service import memory_account

logger = logging.getLogger("sketchlu.commands.precompute")


def cmd_precompute(cfg: PrecomputeConfig, settings: Optional[Settings] = None) -> Path:
    """
    Build the sketched basis of the GGN at a trained checkpoint.

    Steps:
    - load the checkpoint and the (optionally subsampled) training inputs
    - k0 > 0: hi-memory phase, then sketched Lanczos on the deflated GGN
    - k0 = 0: plain sketched Lanczos for k1 iterations
    - write the SKLB file plus <stem>.json (config, manifest, memory) and
      <stem>.timings.json
    """
    settings = settings or get_settings()
    timer = StageTimer()

    with timer.stage("load"):
        model = CheckpointRepo().load(cfg.checkpoint)
        data = train_dataset(cfg)
        if data.d != model.input_dim:
            raise DimensionMismatch(f"checkpoint expects d={model.input_dim}, training data has d={data.d}")
        full_n = data.n
        data, indices = subsample(data, cfg.subsample_trainset, derive_seed(cfg.seed, 7))

    p = model.n_params
    preprocess_floats, query_floats = memory_account(p, cfg.s, cfg.k0 + cfg.k1, cfg.k0)
    logger.info(
        "Memory budget",
        extra={"p": p, "s": cfg.s, "k0": cfg.k0, "k1": cfg.k1, "preprocess_floats": preprocess_floats, "query_floats": query_floats},
    )

    with timer.stage("sketch"):
        sk = sketch_new(p, cfg.s, cfg.sketch_seed, transform=cfg.transform)

    with timer.stage("lanczos"):
        op = GgnOperator(model, data.inputs, LossKind(cfg.loss), batch_size=settings.ggn_batch_size)
        basis: SketchedBasis = preconditioned_sketched_lanczos(
            op, cfg.k0, cfg.k1, sk, cfg.seed, retain_eigenvalues=cfg.use_eigenvals
        )

    out = Path(cfg.out)
    with timer.stage("write"):
        BasisRepo().save(basis, out, include_eigenvalues=cfg.use_eigenvals)

    subsampled = 0 < cfg.subsample_trainset < full_n
    write_json(
        {
            "config": config_snapshot(cfg),
            "dataset": data.manifest,
            "p": p,
            "k": basis.k,
            "k0": basis.k0,
            "orthogonality_defect": basis.orthogonality_defect,
            "memory": {"preprocess_floats": preprocess_floats, "query_floats": query_floats},
            "subsample_indices": indices.tolist() if subsampled else None,
        },
        sidecar(out, "json"),
    )
    write_json(timer.timings, sidecar(out, "timings.json"))

    logger.info(
        "Precompute command finished",
        extra={"basis": str(out), "p": p, "k": basis.k, "k0": basis.k0, "n_points": data.n},
    )
    return out


@click.command("precompute")
@config_option
@data_options
@click.option("--checkpoint", type=str, default=None)
@click.option("--loss", type=click.Choice(["mse", "cross_entropy"]), default=None)
@click.option("--k0", "--lanczos-hm-iter", "k0", type=int, default=None, help="Hi-memory (dense) iterations.")
@click.option("--k1", "--lanczos-lm-iter", "k1", type=int, default=None, help="Sketched low-memory iterations.")
@click.option("--s", "--sketch-size", "s", type=int, default=None, help="Sketch size.")
@click.option("--transform", type=click.Choice(["wht", "dft"]), default=None)
@click.option("--seed", type=int, default=None, help="Lanczos start-vector seed.")
@click.option("--sketch-seed", type=int, default=None)
@click.option("--subsample-trainset", type=int, default=None, help="Use a seeded subset of this many points.")
@click.option("--use-eigenvals/--no-eigenvals", "use_eigenvals", default=None)
@click.option("--out", type=str, default=None, help="SKLB output path.")
@exit_on_error
def precompute_command(config_path: str | None, **flags: Any) -> None:
    """Run (preconditioned) sketched Lanczos on the GGN and write an SKLB file."""
    cfg = load_run_config(PrecomputeConfig, "precompute", config_path, flags)
    out = cmd_precompute(cfg)
    click.echo(str(out))
