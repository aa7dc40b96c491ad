from __future__ import annotations

import math
from typing import Any, Dict, List

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ReportTable(BaseModel):
    """Labelled matrix (e.g. an error surface over a k × s grid)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    row_labels: List[str]
    col_labels: List[str]
    values: np.ndarray
    index_name: str = "row"

    @field_validator("values", mode="before")
    @classmethod
    def _matrix(cls, v: Any) -> np.ndarray:
        return np.array(v, dtype=np.float64, ndmin=2)

    @model_validator(mode="after")
    def _check(self) -> "ReportTable":
        if self.values.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValueError(
                f"table values have shape {self.values.shape}, labels give "
                f"({len(self.row_labels)}, {len(self.col_labels)})"
            )
        return self

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, index=self.row_labels, columns=self.col_labels)
        frame.index.name = self.index_name
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index_name": self.index_name,
            "row_labels": list(self.row_labels),
            "col_labels": list(self.col_labels),
            "values": [[None if math.isnan(x) else x for x in row] for row in self.values.tolist()],
        }


class ExperimentReport(BaseModel):
    """
    Result of one bench / eval run.

    - config: the validated run config, verbatim
    - metrics: scalar results, all finite
    - tables: named matrices, written as CSV next to the JSON report
    - timings: stage -> seconds (kept out of the primary JSON)
    - memory: structure -> float count
    """

    name: str
    config: Dict[str, Any] = Field(default_factory=dict)
    metrics: Dict[str, float] = Field(default_factory=dict)
    tables: Dict[str, ReportTable] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    memory: Dict[str, float] = Field(default_factory=dict)

    @field_validator("metrics")
    @classmethod
    def _finite(cls, v: Dict[str, float]) -> Dict[str, float]:
        bad = [key for key, value in v.items() if not math.isfinite(value)]
        if bad:
            raise ValueError(f"non-finite report metrics: {', '.join(sorted(bad))}")
        return v

    def primary_dict(self) -> Dict[str, Any]:
        """Everything except timings; identical across identical re-runs."""
        return {
            "name": self.name,
            "config": self.config,
            "metrics": dict(self.metrics),
            "memory": dict(self.memory),
            "tables": {key: table.to_dict() for key, table in self.tables.items()},
        }
