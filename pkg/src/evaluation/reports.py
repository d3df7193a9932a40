"""
CSV and JSON emission of evaluation results.

JSON is written with sorted keys and no timestamps so reruns with the same
inputs produce identical bytes.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np

from src.evaluation.metrics import ALIGNMENT_CONVENTION, PoseErrorSummary
from src.utils.validation import VolumeFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ERROR_COLUMNS = ["frame_id", "tx_vox", "ty_vox", "tz_vox", "yaw_rad", "pitch_rad", "roll_rad"]


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    """Sorted-key, indented JSON."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise VolumeFormatError(f"cannot write JSON: {exc}", path) from exc
    return path


def error_rows(errors: PoseErrorSummary) -> List[Dict[str, Any]]:
    rows = []
    for k, (t, r) in enumerate(zip(errors.translation_errors, errors.rotation_errors)):
        rows.append(dict(zip(ERROR_COLUMNS, [k, *map(float, t), *map(float, r)])))
    return rows


def write_errors_csv(path: PathLike, errors: PoseErrorSummary) -> Path:
    """One row per frame; the first line records the error convention."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# {ALIGNMENT_CONVENTION}\n")
            writer = csv.DictWriter(f, fieldnames=ERROR_COLUMNS)
            writer.writeheader()
            writer.writerows(error_rows(errors))
    except OSError as exc:
        raise VolumeFormatError(f"cannot write CSV: {exc}", path) from exc
    return path


def read_errors_csv(path: PathLike) -> List[Dict[str, float]]:
    """Rows of a file written by :func:`write_errors_csv`."""
    with open(path, encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(lines)]


def write_summary_json(path: PathLike, summary: Dict[str, Any]) -> Path:
    payload = dict(summary)
    payload.setdefault("alignment_convention", ALIGNMENT_CONVENTION)
    return write_json(path, payload)


def write_benchmark_table(path: PathLike, rows: Sequence[Dict[str, Any]]) -> Path:
    """One row per sequence; columns are the union of row keys in first-seen order."""
    path = Path(path)
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _jsonable(v) for k, v in row.items()})
    except OSError as exc:
        raise VolumeFormatError(f"cannot write CSV: {exc}", path) from exc
    logger.debug(f"Wrote {len(rows)} benchmark rows to {path}")
    return path
