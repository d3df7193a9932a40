"""
Pose file: JSON list of {frame_id, xi, T} under a convention string.

T is stored row-major for readability and must agree with exp(xi) on
load; the convention string must match the library's.
"""

import json
from pathlib import Path
from typing import List, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.registration.se3 import CONVENTION, Pose, PoseSet, exp_map
from src.utils.validation import InvalidInputError, VolumeFormatError

PathLike = Union[str, Path]

CONSISTENCY_TOL = 1e-9


class PoseEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_id: int
    xi: List[float] = Field(min_length=6, max_length=6)
    T: List[float] = Field(min_length=16, max_length=16)
    anchored: bool = False


class PoseFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    convention: str
    poses: List[PoseEntry]


def write_poses(path: PathLike, poses: PoseSet) -> Path:
    path = Path(path)
    document = PoseFile(
        convention=CONVENTION,
        poses=[
            PoseEntry(
                frame_id=i,
                xi=[float(v) for v in pose.xi],
                T=[float(v) for v in pose.matrix.ravel()],
                anchored=anchored,
            )
            for i, (pose, anchored) in enumerate(zip(poses.poses, poses.anchored))
        ],
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(document.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise VolumeFormatError(f"cannot write poses: {exc}", path) from exc
    return path


def read_poses(path: PathLike) -> PoseSet:
    """Load and cross-check a pose file.

    Raises:
        VolumeFormatError: if the file cannot be read
        InvalidInputError: on schema, convention, ordering or T/xi mismatch
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise VolumeFormatError(f"cannot read poses: {exc}", path) from exc
    try:
        document = PoseFile.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise InvalidInputError(f"{path}: invalid pose file: {exc}") from exc
    if document.convention != CONVENTION:
        raise InvalidInputError(
            f"{path}: convention {document.convention!r} does not match {CONVENTION!r}"
        )
    ids = [entry.frame_id for entry in document.poses]
    if ids != list(range(len(ids))):
        raise InvalidInputError(f"{path}: frame ids must be 0..{len(ids) - 1} in order, got {ids}")

    poses = []
    for entry in document.poses:
        stored = np.asarray(entry.T).reshape(4, 4)
        if np.abs(stored - exp_map(entry.xi)).max() > CONSISTENCY_TOL:
            raise InvalidInputError(f"{path}: frame {entry.frame_id} T disagrees with exp(xi)")
        poses.append(Pose.from_xi(entry.xi))
    return PoseSet(tuple(poses), tuple(entry.anchored for entry in document.poses))
