from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import pandas as pd

from sketchlu.models.report import ExperimentReport
from sketchlu.models.run_config import config_hash

logger = logging.getLogger("sketchlu.repositories.report_repo")

PathLike = Union[str, Path]

FLOAT_FORMAT = "%.17g"


def write_csv(frame: pd.DataFrame, path: PathLike, index: bool = False) -> Path:
    """CSV with 17 significant digits and '\\n' line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_json(payload: Mapping[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class ReportRepo:
    """
    Writes ExperimentReports under one output directory.

    Files per report, all sharing the stem `<name>-<confighash12>`:
    - <stem>.json          config, metrics, memory, tables (no timings)
    - <stem>.timings.json  stage timings
    - <stem>.<table>.csv   one per table
    """

    def __init__(self, root: PathLike) -> None:
        self.root = Path(root)

    # -----------------------------
    # Internal Helpers
    # -----------------------------
    def stem(self, report: ExperimentReport) -> str:
        return f"{report.name}-{config_hash(report.config)}"

    # -----------------------------
    # Writes
    # -----------------------------
    def save(self, report: ExperimentReport) -> Dict[str, Path]:
        stem = self.stem(report)
        written: Dict[str, Path] = {}
        try:
            written["report"] = write_json(report.primary_dict(), self.root / f"{stem}.json")
            written["timings"] = write_json(report.timings, self.root / f"{stem}.timings.json")
            for key, table in report.tables.items():
                safe = key.replace("=", "").replace("/", "_")
                written[key] = write_csv(table.to_frame(), self.root / f"{stem}.{safe}.csv", index=True)
        except OSError:
            logger.exception("Failed to write report", extra={"report": report.name, "root": str(self.root)})
            raise

        logger.info(
            "Report written",
            extra={"report": report.name, "path": str(written["report"]), "tables": len(report.tables)},
        )
        return written

    # -----------------------------
    # Reads
    # -----------------------------
    def load(self, path: PathLike) -> Dict[str, Any]:
        return json.loads(Path(path).read_text(encoding="utf-8"))
