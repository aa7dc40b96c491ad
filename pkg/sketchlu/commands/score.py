from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
import pandas as pd

from sketchlu.commands.common import (
    StageTimer,
    config_option,
    data_options,
    exit_on_error,
    sidecar,
    test_datasets,
    train_dataset,
)
from sketchlu.config import Settings, get_settings
from sketchlu.core.exceptions import DimensionMismatch
from sketchlu.models.dataset import Dataset
from sketchlu.models.mlp import LossKind, MlpModel
from sketchlu.models.run_config import ScoreConfig, config_snapshot, load_run_config
from sketchlu.repositories.basis_repo import BasisRepo
from sketchlu.repositories.checkpoint_repo import CheckpointRepo
from sketchlu.repositories.report_repo import write_csv, write_json
from sketchlu.services.eval_service import auroc, fpr_at_tpr
from sketchlu.services.score_service import (
    CLAMP_COLUMNS,
    FRAME_COLUMNS,
    SCORE_COLUMNS,
    DenseBasis,
    ScoreMethod,
    ScorePipeline,
    ggn_diagonal,
    score_dataset,
)

logger = logging.getLogger("sketchlu.commands.score")


def build_pipeline(cfg: ScoreConfig, model: MlpModel, settings: Settings) -> ScorePipeline:
    """Assemble the ScorePipeline for cfg.method from the persisted artifacts."""
    method = ScoreMethod(cfg.method)
    if method is ScoreMethod.diag_laplace:
        train = train_dataset(cfg)
        diagonal = ggn_diagonal(model, train.inputs, LossKind(cfg.loss), batch_size=settings.ggn_batch_size)
        return ScorePipeline(model=model, method=method, diagonal=diagonal, alpha=cfg.alpha)

    basis = BasisRepo().load(cfg.basis)
    if method is ScoreMethod.slu:
        return ScorePipeline(model=model, method=method, sketched=basis, alpha=cfg.alpha)

    u0, lam0 = BasisRepo.require_dense(basis, need_eigenvalues=method is ScoreMethod.lla)
    dense = DenseBasis(U=u0, eigenvalues=lam0 if method is ScoreMethod.lla else None)
    return ScorePipeline(model=model, method=method, dense=dense, alpha=cfg.alpha)


def _selected(cfg: ScoreConfig, sets: Dict[str, Optional[Dataset]]) -> List[Dataset]:
    names = ["id_test", "ood_test"] if cfg.split == "both" else [cfg.split]
    return [sets[name] for name in names if sets.get(name) is not None]


def cmd_score(cfg: ScoreConfig, settings: Optional[Settings] = None) -> Path:
    """
    Score test points and write one CSV row per point
    (dataset_id, point_index, method, score).

    SLU runs also write <stem>.clamped.csv listing every point whose raw
    score was negative and reported as 0. When both an ID and an OoD set
    are scored, <stem>.summary.json holds AUROC and FPR at 95% TPR.
    """
    settings = settings or get_settings()
    timer = StageTimer()

    with timer.stage("load"):
        model = CheckpointRepo().load(cfg.checkpoint)
        pipe = build_pipeline(cfg, model, settings)
        datasets = _selected(cfg, test_datasets(cfg))

    frames: List[pd.DataFrame] = []
    with timer.stage("score"):
        for data in datasets:
            if data.n and data.d != model.input_dim:
                raise DimensionMismatch(f"checkpoint expects d={model.input_dim}, {data.name} has d={data.d}")
            frames.append(score_dataset(pipe, data, show_progress=settings.show_progress))

    scores = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=FRAME_COLUMNS)
    out = Path(cfg.out)
    write_csv(scores[SCORE_COLUMNS], out)
    if ScoreMethod(cfg.method) is ScoreMethod.slu:
        write_csv(scores.loc[scores["clamped"].astype(bool), CLAMP_COLUMNS], sidecar(out, "clamped.csv"))

    by_set = {name: group["score"].to_numpy() for name, group in scores.groupby("dataset_id", sort=False)}
    id_scores, ood_scores = by_set.get("id_test"), by_set.get("ood_test")
    if id_scores is not None and ood_scores is not None and id_scores.size and ood_scores.size:
        summary = {
            "config": config_snapshot(cfg),
            "metrics": {"auroc": auroc(id_scores, ood_scores), "fpr_at_95_tpr": fpr_at_tpr(id_scores, ood_scores)},
            "datasets": {data.name: data.manifest for data in datasets},
        }
        write_json(summary, sidecar(out, "summary.json"))
        logger.info("OoD metrics", extra={"method": cfg.method, **summary["metrics"]})
    write_json(timer.timings, sidecar(out, "timings.json"))

    logger.info("Score command finished", extra={"scores": str(out), "rows": len(scores), "method": cfg.method})
    return out


@click.command("score")
@config_option
@data_options
@click.option("--checkpoint", type=str, default=None)
@click.option("--basis", type=str, default=None, help="SKLB basis file (not needed for diag_laplace).")
@click.option("--method", type=click.Choice([m.value for m in ScoreMethod]), default=None)
@click.option("--alpha", type=float, default=None, help="Prior precision for lla / diag_laplace.")
@click.option("--loss", type=click.Choice(["mse", "cross_entropy"]), default=None)
@click.option("--split", type=click.Choice(["id_test", "ood_test", "both"]), default=None)
@click.option("--out", type=str, default=None, help="Scores CSV path.")
@exit_on_error
def score_command(config_path: str | None, **flags: Any) -> None:
    """Score test points with slu / le_exact / lla / diag_laplace."""
    cfg = load_run_config(ScoreConfig, "score", config_path, flags)
    out = cmd_score(cfg)
    click.echo(str(out))
