from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Type

import click

from sketchlu.commands.common import config_option, exit_on_error
from sketchlu.config import Settings, get_settings
from sketchlu.models.dataset import SyntheticFisher
from sketchlu.models.report import ExperimentReport
from sketchlu.models.run_config import (
    AblationConfig,
    FisherConfig,
    Lemma1Config,
    Lemma2Config,
    MemoryConfig,
    PreconditionConfig,
    ProjectorConfig,
    RunConfig,
    SpectrumConfig,
    config_snapshot,
    load_run_config,
)
from sketchlu.repositories.report_repo import ReportRepo
from sketchlu.services.data_service import synthetic_fisher
from sketchlu.services.eval_service import (
    ablation_surface,
    lemma1_check,
    lemma2_check,
    memory_report,
    preconditioning_ablation,
    projector_agreement,
    spectrum_study,
)

logger = logging.getLogger("sketchlu.commands.bench")

SPEARMAN_THRESHOLD = -0.8


# -------------------------------
# Runners (config -> report)
# -------------------------------


def _fisher(cfg: FisherConfig) -> SyntheticFisher:
    return synthetic_fisher(cfg.p, cfg.R, cfg.decay, cfg.fisher_seed)


def run_lemma1(cfg: Lemma1Config, settings: Settings) -> ExperimentReport:
    return lemma1_check(
        cfg.p, cfg.k, cfg.s, cfg.trials, cfg.seed,
        aligned=cfg.aligned, transform=cfg.transform, show_progress=settings.show_progress,
    )


def run_lemma2(cfg: Lemma2Config, settings: Settings) -> ExperimentReport:
    return lemma2_check(
        cfg.p, cfg.k, cfg.s, cfg.trials, cfg.seed,
        transform=cfg.transform, show_progress=settings.show_progress,
    )


def run_ablation(cfg: AblationConfig, settings: Settings) -> ExperimentReport:
    report = ablation_surface(
        _fisher(cfg), cfg.k_grid, cfg.s_grid, cfg.m_queries, cfg.seed,
        include_inf=cfg.include_inf, n_jobs=settings.n_jobs, show_progress=settings.show_progress,
    )
    for key in ("spearman_s_max", "spearman_k_max"):
        value = report.metrics.get(key)
        if value is not None and value > SPEARMAN_THRESHOLD:
            logger.warning("Error trend weaker than expected", extra={"metric": key, "value": value})
    return report


def run_precondition(cfg: PreconditionConfig, settings: Settings) -> ExperimentReport:
    return preconditioning_ablation(_fisher(cfg), cfg.k_total, cfg.k0_grid, cfg.s, cfg.m_queries, cfg.seed)


def run_projector(cfg: ProjectorConfig, settings: Settings) -> ExperimentReport:
    distance = projector_agreement(_fisher(cfg).operator(), cfg.k, cfg.top_pc, cfg.seed)
    return ExperimentReport(name="projector", metrics={"projector_distance": distance})


def run_spectrum(cfg: SpectrumConfig, settings: Settings) -> ExperimentReport:
    return spectrum_study(_fisher(cfg).operator(), cfg.iterations, cfg.seeds, cfg.top_fraction)


def run_memory(cfg: MemoryConfig, settings: Settings) -> ExperimentReport:
    return memory_report(cfg.p, cfg.s, cfg.k, cfg.k0, cfg.seed)


def run_bench(
    name: str,
    cfg: RunConfig,
    settings: Optional[Settings] = None,
    out_dir: Optional[str] = None,
) -> Dict[str, Path]:
    """Run one bench, stamp the full run config into the report and persist it."""
    settings = settings or get_settings()
    runner, _ = BENCHES[name]
    report = runner(cfg, settings)
    report = report.model_copy(update={"name": name, "config": config_snapshot(cfg)})
    written = ReportRepo(out_dir or settings.output_dir).save(report)
    logger.info("Bench finished", extra={"bench": name, "metrics": report.metrics})
    return written


BENCHES: Dict[str, tuple[Callable[[Any, Settings], ExperimentReport], Type[RunConfig]]] = {
    "lemma1": (run_lemma1, Lemma1Config),
    "lemma2": (run_lemma2, Lemma2Config),
    "ablation": (run_ablation, AblationConfig),
    "precondition": (run_precondition, PreconditionConfig),
    "projector": (run_projector, ProjectorConfig),
    "spectrum": (run_spectrum, SpectrumConfig),
    "memory": (run_memory, MemoryConfig),
}


# -------------------------------
# Click surface
# -------------------------------


def _invoke(name: str, config_path: Optional[str], out_dir: Optional[str], flags: Dict[str, Any]) -> None:
    _, config_cls = BENCHES[name]
    cfg = load_run_config(config_cls, f"bench.{name}", config_path, flags)
    written = run_bench(name, cfg, out_dir=out_dir)
    report = ReportRepo(written["report"].parent).load(written["report"])
    for key in sorted(report["metrics"]):
        click.echo(f"{key}\t{report['metrics'][key]:.6g}")
    click.echo(str(written["report"]))


def _out_dir_option(func: Callable[..., Any]) -> Callable[..., Any]:
    return click.option("--out-dir", type=str, default=None, help="Report directory (default: SKETCHLU_OUTPUT_DIR).")(func)


def _fisher_options(func: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option("--p", type=int, default=None, help="Parameter dimension."),
        click.option("--R", "R", type=int, default=None, help="Rank of the synthetic Fisher."),
        click.option("--decay", type=float, default=None),
        click.option("--fisher-seed", type=int, default=None),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@click.group("bench")
def bench_group() -> None:
    """Synthetic verifiers and ablations; each writes a JSON report plus CSV tables."""


@bench_group.command("lemma1")
@config_option
@_out_dir_option
@click.option("--p", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--s", "--sketch-size", "s", type=int, default=None)
@click.option("--trials", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--aligned/--random", "aligned", default=None, help="Query inside span(U) instead of a random unit vector.")
@click.option("--transform", type=click.Choice(["wht", "dft"]), default=None)
@exit_on_error
def lemma1_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Error of sketched norms of projections onto a fixed subspace."""
    _invoke("lemma1", config_path, out_dir, flags)


@bench_group.command("lemma2")
@config_option
@_out_dir_option
@click.option("--p", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--s", "--sketch-size", "s", type=int, default=None)
@click.option("--trials", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--transform", type=click.Choice(["wht", "dft"]), default=None)
@exit_on_error
def lemma2_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Error of projecting onto the orthogonalized sketch of Lanczos vectors."""
    _invoke("lemma2", config_path, out_dir, flags)


@bench_group.command("ablation")
@config_option
@_out_dir_option
@_fisher_options
@click.option("--k-grid", type=int, multiple=True, help="Lanczos iterations (repeat).")
@click.option("--s-grid", type=int, multiple=True, help="Sketch sizes (repeat).")
@click.option("--m-queries", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--include-inf/--no-inf", "include_inf", default=None)
@exit_on_error
def ablation_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Score error over a (k, s) grid, split into sketch and low-rank parts."""
    _invoke("ablation", config_path, out_dir, flags)


@bench_group.command("precondition")
@config_option
@_out_dir_option
@_fisher_options
@click.option("--k-total", type=int, default=None)
@click.option("--k0-grid", type=int, multiple=True, help="Hi-memory iterations to try (repeat).")
@click.option("--s", "--sketch-size", "s", type=int, default=None)
@click.option("--m-queries", type=int, default=None)
@click.option("--seed", type=int, default=None)
@exit_on_error
def precondition_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Equal-rank comparison of hi-memory / sketched iteration splits."""
    _invoke("precondition", config_path, out_dir, flags)


@bench_group.command("projector")
@config_option
@_out_dir_option
@_fisher_options
@click.option("--k", type=int, default=None)
@click.option("--top-pc", type=int, default=None)
@click.option("--seed", type=int, default=None)
@exit_on_error
def projector_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Distance between hi-memory and post-hoc orthogonalized principal subspaces."""
    _invoke("projector", config_path, out_dir, flags)


@bench_group.command("spectrum")
@config_option
@_out_dir_option
@_fisher_options
@click.option("--iterations", type=int, multiple=True, help="Lanczos iteration counts (repeat).")
@click.option("--seeds", type=int, multiple=True, help="Start-vector seeds (repeat).")
@click.option("--top-fraction", type=float, default=None)
@exit_on_error
def spectrum_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Ritz values across seeds and iteration counts."""
    _invoke("spectrum", config_path, out_dir, flags)


@bench_group.command("memory")
@config_option
@_out_dir_option
@click.option("--p", type=int, default=None)
@click.option("--s", "--sketch-size", "s", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--k0", type=int, default=None)
@click.option("--seed", type=int, default=None)
@exit_on_error
def memory_command(config_path: str | None, out_dir: str | None, **flags: Any) -> None:
    """Float budgets of the sketched method against the dense one."""
    _invoke("memory", config_path, out_dir, flags)
