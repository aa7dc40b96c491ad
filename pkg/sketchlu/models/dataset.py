from __future__ import annotations

from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import ConfigDict, Field, field_validator, model_validator
from scipy.sparse.linalg import LinearOperator

from sketchlu.core.exceptions import CheckedModel, DimensionMismatch, InputError, InvalidBasis, InvalidDimensions
from sketchlu.core.linalg import frozen, orthogonality_defect


class Dataset(CheckedModel):
    """
    Inputs (n × d, one sample per row) with optional targets.

    targets are class indices (n,) for classification or an n × t array for
    regression. The manifest records where the data came from and which
    transforms were applied, in order.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    name: str
    seed: int = 0
    manifest: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("inputs", mode="before")
    @classmethod
    def _inputs(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidDimensions(f"inputs must be 2-D (n × d), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("inputs must be finite")
        return frozen(np.ascontiguousarray(arr))

    @field_validator("targets", mode="before")
    @classmethod
    def _targets(cls, v: Any) -> Optional[np.ndarray]:
        if v is None:
            return None
        return frozen(np.array(v))

    @model_validator(mode="after")
    def _check(self) -> "Dataset":
        if self.targets is not None and self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionMismatch(
                f"{self.targets.shape[0]} targets for {self.inputs.shape[0]} inputs"
            )
        return self

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def d(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def transforms(self) -> List[str]:
        return list(self.manifest.get("transforms", []))

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        manifest = dict(self.manifest)
        manifest["subset_size"] = int(idx.size)
        return Dataset(
            inputs=self.inputs[idx],
            targets=None if self.targets is None else self.targets[idx],
            name=name or self.name,
            seed=self.seed,
            manifest=manifest,
        )


class SyntheticFisher(CheckedModel):
    """
    Low-rank PSD matrix M = Σ_i λ_i v_i v_iᵀ held through its factors.

    `operator()` applies M without forming it; `projection_norm(x)` is the
    exact ‖Vᵀx‖ oracle.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p: int
    R: int
    V: np.ndarray
    lambdas: np.ndarray
    seed: int = 0
    decay: float = 0.9

    @field_validator("V", "lambdas", mode="before")
    @classmethod
    def _freeze(cls, v: Any) -> np.ndarray:
        return frozen(np.array(v, dtype=np.float64))

    @model_validator(mode="after")
    def _check(self) -> "SyntheticFisher":
        if self.V.shape != (self.p, self.R):
            raise DimensionMismatch(f"V has shape {self.V.shape}, expected ({self.p}, {self.R})")
        if self.lambdas.shape != (self.R,) or np.any(self.lambdas <= 0):
            raise InputError("lambdas must be R positive values")
        if orthogonality_defect(self.V) > 1e-10:
            raise InvalidBasis("V must be column-orthonormal")
        return self

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return self.V @ (self.lambdas * (self.V.T @ x))

    def operator(self) -> LinearOperator:
        return LinearOperator(
            shape=(self.p, self.p), matvec=self.matvec, rmatvec=self.matvec, dtype=np.float64
        )

    def dense(self) -> np.ndarray:
        return (self.V * self.lambdas) @ self.V.T

    def projection_norm(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.V.T @ np.asarray(x, dtype=np.float64)))
