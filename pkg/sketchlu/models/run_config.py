from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Type, TypeVar

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from sketchlu.core.exceptions import ConfigError
from sketchlu.models.mlp import Activation, LossKind
from sketchlu.services.score_service import ScoreMethod

logger = logging.getLogger("sketchlu.models.run_config")

# Field name -> command-line flag, used in validation messages.
FLAG_NAMES: Dict[str, str] = {
    "k0": "--lanczos-hm-iter",
    "k1": "--lanczos-lm-iter",
    "s": "--sketch-size",
    "subsample_trainset": "--subsample-trainset",
    "use_eigenvals": "--use-eigenvals",
}


def flag_for(field: str) -> str:
    return FLAG_NAMES.get(field, "--" + field.replace("_", "-"))


class RunConfig(BaseModel):
    """Base for per-command configs: every field defaulted, unknown keys rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=True)


# -------------------------------
# Data selection
# -------------------------------


class DataConfig(RunConfig):
    """
    Where a command's data comes from.

    - two_gaussian: the synthetic OoD task, fully determined by (d, n, shift, data_seed)
    - idx: IDX files; `images` is required, OoD data comes from `ood_images`
      or from rotating the ID images by `rotate` degrees
    """

    data_source: Literal["two_gaussian", "idx"] = "two_gaussian"
    d: int = Field(default=8, ge=2)
    n: int = Field(default=2000, ge=10)
    shift: float = 6.0
    separation: float = 2.0
    data_seed: int = Field(default=0, ge=0)
    images: Optional[str] = None
    labels: Optional[str] = None
    ood_images: Optional[str] = None
    ood_labels: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    rotate: float = 0.0

    @model_validator(mode="after")
    def _idx_paths(self) -> "DataConfig":
        if self.data_source == "idx" and not self.images:
            raise ValueError("data_source 'idx' requires --images")
        return self


# -------------------------------
# Commands
# -------------------------------


class TrainConfig(DataConfig):
    hidden: List[int] = Field(default_factory=lambda: [32, 32])
    activation: Activation = Activation.tanh
    loss: LossKind = LossKind.cross_entropy
    epochs: int = Field(default=30, ge=0)
    lr: float = Field(default=0.1, gt=0)
    batch: int = Field(default=64, ge=1)
    seed: int = Field(default=0, ge=0)
    out: str = "model.mlpc"


class PrecomputeConfig(DataConfig):
    checkpoint: str = "model.mlpc"
    loss: LossKind = LossKind.cross_entropy
    k0: int = Field(default=0, ge=0)
    k1: int = Field(default=20, ge=0)
    s: int = Field(default=512, ge=1)
    transform: Literal["wht", "dft"] = "wht"
    seed: int = Field(default=0, ge=0)
    sketch_seed: int = Field(default=1, ge=0)
    subsample_trainset: int = Field(default=0, ge=0)
    use_eigenvals: bool = False
    out: str = "basis.sklb"

    @model_validator(mode="after")
    def _ranks(self) -> "PrecomputeConfig":
        if self.k0 + self.k1 < 1:
            raise ValueError("--lanczos-hm-iter plus --lanczos-lm-iter must be at least 1")
        return self


class ScoreConfig(DataConfig):
    checkpoint: str = "model.mlpc"
    basis: Optional[str] = "basis.sklb"
    method: ScoreMethod = ScoreMethod.slu
    alpha: float = Field(default=1.0, gt=0)
    loss: LossKind = LossKind.cross_entropy
    split: Literal["id_test", "ood_test", "both"] = "both"
    out: str = "scores.csv"

    @model_validator(mode="after")
    def _basis_needed(self) -> "ScoreConfig":
        if self.method != ScoreMethod.diag_laplace.value and not self.basis:
            raise ValueError(f"method {self.method} requires --basis")
        return self


class Lemma1Config(RunConfig):
    p: int = Field(default=4096, ge=1)
    k: int = Field(default=16, ge=1)
    s: int = Field(default=1024, ge=1)
    trials: int = Field(default=500, ge=1)
    seed: int = Field(default=0, ge=0)
    aligned: bool = False
    transform: Literal["wht", "dft"] = "wht"


class Lemma2Config(RunConfig):
    p: int = Field(default=4096, ge=1)
    k: int = Field(default=16, ge=1)
    s: int = Field(default=1024, ge=1)
    trials: int = Field(default=500, ge=1)
    seed: int = Field(default=0, ge=0)
    transform: Literal["wht", "dft"] = "wht"


class FisherConfig(RunConfig):
    p: int = Field(default=10_000, ge=1)
    R: int = Field(default=100, ge=1)
    decay: float = Field(default=0.9, gt=0, lt=1)
    fisher_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _rank(self) -> "FisherConfig":
        if self.R > self.p:
            raise ValueError(f"--R ({self.R}) must not exceed --p ({self.p})")
        return self


class AblationConfig(FisherConfig):
    k_grid: List[int] = Field(default_factory=lambda: [10, 20, 40, 80])
    s_grid: List[int] = Field(default_factory=lambda: [256, 512, 1024, 2048])
    m_queries: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    include_inf: bool = True


class PreconditionConfig(FisherConfig):
    k_total: int = Field(default=50, ge=1)
    k0_grid: List[int] = Field(default_factory=lambda: [0, 10, 20])
    s: int = Field(default=2048, ge=1)
    m_queries: int = Field(default=20, ge=1)
    seed: int = Field(default=0, ge=0)


class ProjectorConfig(FisherConfig):
    p: int = Field(default=500, ge=1)
    R: int = Field(default=500, ge=1)
    k: int = Field(default=40, ge=1)
    top_pc: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)


class SpectrumConfig(FisherConfig):
    p: int = Field(default=2000, ge=1)
    R: int = Field(default=200, ge=1)
    iterations: List[int] = Field(default_factory=lambda: [20, 40])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    top_fraction: float = Field(default=0.9, gt=0, le=1)


class MemoryConfig(RunConfig):
    p: int = Field(default=4096, ge=1)
    s: int = Field(default=512, ge=1)
    k: int = Field(default=16, ge=1)
    k0: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)


BENCH_CONFIGS: Dict[str, Type[RunConfig]] = {
    "lemma1": Lemma1Config,
    "lemma2": Lemma2Config,
    "ablation": AblationConfig,
    "precondition": PreconditionConfig,
    "projector": ProjectorConfig,
    "spectrum": SpectrumConfig,
    "memory": MemoryConfig,
}


# -------------------------------
# Loading
# -------------------------------

C = TypeVar("C", bound=RunConfig)


def _file_section(path: Path, section: str) -> Dict[str, Any]:
    """
    Values for `section` from a YAML config file.

    Accepted shapes:
    - a report JSON written by this tool (its "config" block is used)
    - a mapping with the section under its dotted name ("bench.lemma1") or
      nested ({"bench": {"lemma1": ...}})
    - a flat mapping of field values
    """
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"--config file not found: {path}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"--config file {path} is not valid YAML: {err}") from err

    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"--config file {path} must hold a mapping")
    if isinstance(raw.get("config"), dict) and "metrics" in raw:
        return dict(raw["config"])
    if section in raw and isinstance(raw[section], dict):
        return dict(raw[section])
    node: Any = raw
    for part in section.split("."):
        if not isinstance(node, dict) or part not in node:
            node = None
            break
        node = node[part]
    if isinstance(node, dict):
        return dict(node)
    return dict(raw)


def _describe(err: ValidationError) -> str:
    parts = []
    for item in err.errors():
        loc = [str(x) for x in item.get("loc", ())]
        where = flag_for(loc[0]) if loc else "config"
        parts.append(f"{where}: {item.get('msg')}")
    return "; ".join(parts)


def load_run_config(
    model: Type[C],
    section: str,
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> C:
    """
    Build a validated run config with precedence defaults < config file < flags.

    `overrides` holds the command-line values; None entries mean "flag not given".
    """
    values: Dict[str, Any] = {}
    if config_path:
        values.update(_file_section(Path(config_path), section))
    for key, value in (overrides or {}).items():
        if value is None or (isinstance(value, tuple) and not value):
            continue
        values[key] = list(value) if isinstance(value, tuple) else value

    try:
        cfg = model.model_validate(values)
    except ValidationError as err:
        message = _describe(err)
        logger.error("Invalid run config", extra={"section": section, "errors": message})
        raise ConfigError(message) from err

    logger.debug("Run config resolved", extra={"section": section, "config": cfg.model_dump(mode="json")})
    return cfg


def config_snapshot(cfg: RunConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def config_hash(cfg: RunConfig | Mapping[str, Any]) -> str:
    """First 12 hex chars of SHA-256 over the canonical (sorted-key) JSON."""
    snapshot = config_snapshot(cfg) if isinstance(cfg, RunConfig) else dict(cfg)
    canonical = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
