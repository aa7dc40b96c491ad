from __future__ import annotations

import logging
import time
from enum import Enum
from typing import Any, List, Optional

import numpy as np
import pandas as pd
from pydantic import ConfigDict, field_validator, model_validator
from scipy.special import softmax
from tqdm import tqdm

from sketchlu.core.exceptions import CheckedModel, DimensionMismatch, InvalidAlpha, InvalidBasis, InvalidPipeline
from sketchlu.core.linalg import frobenius_norm_sq, frozen, orthogonality_defect
from sketchlu.core.sketched_lanczos import SketchedBasis
from sketchlu.models.dataset import Dataset
from sketchlu.models.mlp import (
    LossKind,
    MlpModel,
    forward_batch,
    jacobian_transpose,
    per_sample_jacobians,
)

logger = logging.getLogger("sketchlu.services.score_service")

SCORE_COLUMNS = ["dataset_id", "point_index", "method", "score"]
FRAME_COLUMNS = [*SCORE_COLUMNS, "raw_score", "clamped"]
CLAMP_COLUMNS = ["dataset_id", "point_index", "raw_score"]


class ScoreMethod(str, Enum):
    slu = "slu"
    le_exact = "le_exact"
    lla = "lla"
    diag_laplace = "diag_laplace"


def _check_alpha(alpha: float) -> float:
    if not alpha > 0:
        raise InvalidAlpha(f"prior precision alpha must be > 0, got {alpha}")
    return float(alpha)


# -------------------------------
# Pipeline
# -------------------------------


class DenseBasis(CheckedModel):
    """Column-orthonormal p × k basis with optional eigenvalues (LE / LLA)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    U: np.ndarray
    eigenvalues: Optional[np.ndarray] = None

    @field_validator("U", mode="before")
    @classmethod
    def _matrix(cls, v: Any) -> np.ndarray:
        return frozen(np.array(v, dtype=np.float64, order="F", ndmin=2))

    @field_validator("eigenvalues", mode="before")
    @classmethod
    def _vector(cls, v: Any) -> Optional[np.ndarray]:
        return None if v is None else frozen(np.array(v, dtype=np.float64).reshape(-1))

    @model_validator(mode="after")
    def _check(self) -> "DenseBasis":
        if orthogonality_defect(self.U) > 1e-8:
            raise InvalidBasis("dense basis must be column-orthonormal")
        if self.eigenvalues is not None and self.eigenvalues.size != self.U.shape[1]:
            raise InvalidBasis("eigenvalues must align with basis columns")
        return self


class ScorePipeline(CheckedModel):
    """
    Everything needed to score query points with one method.

    Field requirements per method:
    - slu: a SketchedBasis (which carries its sketch)
    - le_exact: a DenseBasis
    - lla: a DenseBasis with eigenvalues, alpha > 0
    - diag_laplace: the GGN diagonal, alpha > 0
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    model: MlpModel
    method: ScoreMethod
    sketched: Optional[SketchedBasis] = None
    dense: Optional[DenseBasis] = None
    diagonal: Optional[np.ndarray] = None
    alpha: float = 1.0

    @model_validator(mode="after")
    def _consistent(self) -> "ScorePipeline":
        method = self.method
        if method is ScoreMethod.slu and self.sketched is None:
            raise InvalidPipeline("slu scoring needs a sketched basis")
        if method in (ScoreMethod.le_exact, ScoreMethod.lla) and self.dense is None:
            raise InvalidPipeline(f"{method.value} scoring needs a dense basis")
        if method is ScoreMethod.lla and self.dense.eigenvalues is None:
            raise InvalidPipeline("lla scoring needs eigenvalues")
        if method is ScoreMethod.diag_laplace and self.diagonal is None:
            raise InvalidPipeline("diag_laplace scoring needs the GGN diagonal")
        if method in (ScoreMethod.lla, ScoreMethod.diag_laplace):
            _check_alpha(self.alpha)
        p = self.model.n_params
        if self.sketched is not None and self.sketched.sketch.p != p:
            raise DimensionMismatch(f"sketch is for p={self.sketched.sketch.p}, model has p={p}")
        if self.dense is not None and self.dense.U.shape[0] != p:
            raise DimensionMismatch(f"dense basis has {self.dense.U.shape[0]} rows, model has p={p}")
        if self.diagonal is not None and self.diagonal.shape != (p,):
            raise DimensionMismatch(f"GGN diagonal has shape {self.diagonal.shape}, model has p={p}")
        return self


# -------------------------------
# Scores from an explicit Jacobian (Jᵀ is p × t)
# -------------------------------


def _as_jt(jt: Any) -> np.ndarray:
    jt = np.asarray(jt, dtype=np.float64)
    return jt.reshape(-1, 1) if jt.ndim == 1 else jt


def slu_score_raw(basis: SketchedBasis, jt: Any) -> float:
    """‖J‖_F² − ‖U_Sᵀ (S Jᵀ)‖_F², unclamped."""
    jt = _as_jt(jt)
    sjt = basis.sketch.apply_columns(jt)
    return frobenius_norm_sq(jt) - frobenius_norm_sq(basis.U_S.T @ sjt)


def slu_score_from_jacobian(basis: SketchedBasis, jt: Any) -> float:
    return max(0.0, slu_score_raw(basis, jt))


def exact_score_from_jacobian(u: np.ndarray, jt: Any) -> float:
    jt = _as_jt(jt)
    if u.shape[0] != jt.shape[0]:
        raise DimensionMismatch(f"basis has {u.shape[0]} rows, Jacobian has p={jt.shape[0]}")
    return frobenius_norm_sq(jt) - frobenius_norm_sq(u.T @ jt)


def lla_score_from_jacobian(u: np.ndarray, eigenvalues: np.ndarray, alpha: float, jt: Any) -> float:
    alpha = _check_alpha(alpha)
    jt = _as_jt(jt)
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    if u.shape[1] == 0:
        return frobenius_norm_sq(jt) / alpha
    proj = u.T @ jt
    weights = lam / (alpha * (lam + alpha))
    return frobenius_norm_sq(jt) / alpha - float(np.sum(weights * np.sum(proj * proj, axis=1)))


def diag_laplace_score_from_jacobian(diagonal: np.ndarray, alpha: float, jt: Any) -> float:
    alpha = _check_alpha(alpha)
    jt = _as_jt(jt)
    return float(np.sum(np.sum(jt * jt, axis=1) / (diagonal + alpha)))


# -------------------------------
# Public score operations
# -------------------------------


def slu_score(pipe: ScorePipeline, x: Any) -> float:
    """
    Sketched low-rank uncertainty of a query point (higher = more uncertain).

    Jᵀ is built from t vjp calls; sketch noise can push the raw difference
    below zero, in which case 0 is returned.
    """
    if pipe.method is not ScoreMethod.slu:
        raise InvalidPipeline(f"pipeline method is {pipe.method.value}, not slu")
    return slu_score_from_jacobian(pipe.sketched, jacobian_transpose(pipe.model, x))


def exact_score(model: MlpModel, basis: np.ndarray, x: Any) -> float:
    return exact_score_from_jacobian(np.asarray(basis, dtype=np.float64), jacobian_transpose(model, x))


def lla_score(model: MlpModel, basis: np.ndarray, eigenvalues: np.ndarray, alpha: float, x: Any) -> float:
    """Tr(J M Jᵀ) with M = (1/α)(I − UUᵀ) + U diag(1/(λ+α)) Uᵀ."""
    _check_alpha(alpha)
    return lla_score_from_jacobian(
        np.asarray(basis, dtype=np.float64), eigenvalues, alpha, jacobian_transpose(model, x)
    )


def ggn_diagonal(model: MlpModel, inputs: np.ndarray, loss: LossKind, batch_size: int = 256) -> np.ndarray:
    """
    Exact diag(Σ_i J_iᵀ H_i J_i), accumulated batch by batch into one
    length-p vector.
    """
    loss = LossKind(loss)
    diagonal = np.zeros(model.n_params)
    for lo in range(0, inputs.shape[0], batch_size):
        xb = inputs[lo : lo + batch_size]
        jac = per_sample_jacobians(model, xb)  # n × t × p
        if loss is LossKind.mse:
            diagonal += np.einsum("ntp,ntp->p", jac, jac)
        else:
            pi = softmax(forward_batch(model, xb), axis=1)
            weighted = np.einsum("nt,ntp->np", pi, jac)
            diagonal += np.einsum("nt,ntp,ntp->p", pi, jac, jac) - np.einsum("np,np->p", weighted, weighted)
    return diagonal


def diag_laplace_score(
    model: MlpModel,
    data: Optional[Dataset],
    alpha: float,
    x: Any,
    *,
    loss: LossKind = LossKind.cross_entropy,
    diagonal: Optional[np.ndarray] = None,
) -> float:
    """Σ_j ‖J[:, j]‖² / (G_jj + α); pass `diagonal` to skip recomputing G_jj."""
    _check_alpha(alpha)
    if diagonal is None:
        diagonal = ggn_diagonal(model, data.inputs, loss) if data is not None and data.n else np.zeros(model.n_params)
    return diag_laplace_score_from_jacobian(diagonal, alpha, jacobian_transpose(model, x))


def score_point(pipe: ScorePipeline, x: Any) -> float:
    jt = jacobian_transpose(pipe.model, x)
    if pipe.method is ScoreMethod.slu:
        return slu_score_from_jacobian(pipe.sketched, jt)
    if pipe.method is ScoreMethod.le_exact:
        return exact_score_from_jacobian(pipe.dense.U, jt)
    if pipe.method is ScoreMethod.lla:
        return lla_score_from_jacobian(pipe.dense.U, pipe.dense.eigenvalues, pipe.alpha, jt)
    return diag_laplace_score_from_jacobian(pipe.diagonal, pipe.alpha, jt)


# -------------------------------
# Batch scoring
# -------------------------------


def score_dataset(pipe: ScorePipeline, data: Dataset, show_progress: bool = False) -> pd.DataFrame:
    """
    One row per point: dataset_id, point_index, method, score, raw_score,
    clamped.

    raw_score is the unclamped value; `clamped` marks SLU rows whose raw
    score was negative and reported as 0. Other methods never clamp.
    """
    start = time.perf_counter()
    raw: List[float] = []
    for i in tqdm(range(data.n), desc=f"score {data.name}", disable=not show_progress):
        if pipe.method is ScoreMethod.slu:
            raw.append(slu_score_raw(pipe.sketched, jacobian_transpose(pipe.model, data.inputs[i])))
        else:
            raw.append(score_point(pipe, data.inputs[i]))

    raw_scores = np.asarray(raw, dtype=np.float64)
    clamped = raw_scores < 0.0 if pipe.method is ScoreMethod.slu else np.zeros(data.n, dtype=bool)
    if clamped.any():
        logger.warning(
            "Negative SLU scores clamped to 0",
            extra={"dataset": data.name, "clamped": int(clamped.sum()), "n": data.n},
        )
    logger.info(
        "Dataset scored",
        extra={
            "dataset": data.name,
            "method": pipe.method.value,
            "n": data.n,
            "latency_ms": int((time.perf_counter() - start) * 1000),
        },
    )
    return pd.DataFrame(
        {
            "dataset_id": [data.name] * data.n,
            "point_index": np.arange(data.n, dtype=np.int64),
            "method": [pipe.method.value] * data.n,
            "score": np.where(clamped, 0.0, raw_scores),
            "raw_score": raw_scores,
            "clamped": clamped,
        },
        columns=FRAME_COLUMNS,
    )
