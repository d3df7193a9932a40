"""
Sequence directories.

Layout::

    manifest.json            frame headers, seeds, protocol echo, phantom
    frame_000.json/.raw      one VolumeFile per frame (+ frame_000.mask.raw)
    truth_poses.json         ground truth (simulated sequences only)
    init_poses.json          initial guesses handed to the solvers
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError

from src.formats.pose_file import read_poses, write_poses
from src.formats.volume_file import read_volume, write_volume
from src.registration.se3 import CONVENTION, PoseSet
from src.registration.volume import Volume3
from src.simulation.simulator import GroundTruthSequence
from src.utils.validation import InvalidInputError, VolumeFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST = "manifest.json"
TRUTH_POSES = "truth_poses.json"
INIT_POSES = "init_poses.json"


class SequenceManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    convention: str = CONVENTION
    n_frames: int
    frames: List[str]
    source_id: str = "custom"
    seed: Optional[int] = None
    attempts: List[int] = []
    sub_seeds: List[List[int]] = []
    protocol: Optional[Dict[str, Any]] = None
    phantom: Optional[Dict[str, Any]] = None


@dataclass
class LoadedSequence:
    """Frames of a sequence directory plus whatever pose files it carries."""

    frames: List[Volume3]
    manifest: SequenceManifest
    truth: Optional[PoseSet] = None
    initial: Optional[PoseSet] = None
    directory: Path = field(default_factory=Path)


def frame_name(index: int) -> str:
    return f"frame_{index:03d}.json"


def write_sequence(
    directory: PathLike,
    sequence: GroundTruthSequence,
    phantom: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write frames, both pose files and the manifest."""
    directory = Path(directory)
    names = [frame_name(k) for k in range(len(sequence.frames))]
    for name, frame in zip(names, sequence.frames):
        write_volume(directory / name, frame, "f32")
    write_poses(directory / TRUTH_POSES, sequence.true_poses)
    write_poses(directory / INIT_POSES, sequence.initial_poses)
    manifest = SequenceManifest(
        n_frames=len(names),
        frames=names,
        source_id=sequence.source_id,
        seed=sequence.protocol.seed,
        attempts=sequence.attempts,
        sub_seeds=sequence.sub_seeds(),
        protocol=sequence.protocol.to_dict(),
        phantom=phantom,
    )
    write_manifest(directory, manifest)
    logger.info(f"Wrote {len(names)} frames to {directory}")
    return directory


def write_manifest(directory: PathLike, manifest: SequenceManifest) -> Path:
    path = Path(directory) / MANIFEST
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(manifest.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise VolumeFormatError(f"cannot write manifest: {exc}", path) from exc
    return path


def read_manifest(directory: PathLike) -> SequenceManifest:
    """Manifest of ``directory``; without one, every frame_*.json in name order."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        names = sorted(
            p.name for p in directory.glob("frame_*.json") if not p.name.endswith(".mask.json")
        )
        if not names:
            raise VolumeFormatError("no manifest.json and no frame_*.json files", directory)
        return SequenceManifest(n_frames=len(names), frames=names)
    try:
        manifest = SequenceManifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise VolumeFormatError(f"cannot read manifest: {exc}", path) from exc
    except (json.JSONDecodeError, ValidationError) as exc:
        raise VolumeFormatError(f"invalid manifest: {exc}", path) from exc
    if manifest.n_frames != len(manifest.frames):
        raise VolumeFormatError(
            f"n_frames={manifest.n_frames} but {len(manifest.frames)} frames listed", path
        )
    return manifest


def read_sequence(directory: PathLike, poses: Optional[PathLike] = None) -> LoadedSequence:
    """Load frames and the pose files present.

    Args:
        directory: sequence directory
        poses: explicit initial-pose file (defaults to init_poses.json when present)

    Raises:
        InvalidInputError: if a pose file's length differs from the frame count
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    frames = [read_volume(directory / name) for name in manifest.frames]

    def optional(path: Path) -> Optional[PoseSet]:
        if not path.exists():
            return None
        loaded = read_poses(path)
        if len(loaded) != len(frames):
            raise InvalidInputError(f"{path}: {len(loaded)} poses for {len(frames)} frames")
        return loaded

    initial_path = Path(poses) if poses is not None else directory / INIT_POSES
    if poses is not None and not initial_path.exists():
        raise VolumeFormatError("pose file not found", initial_path)
    return LoadedSequence(
        frames=frames,
        manifest=manifest,
        truth=optional(directory / TRUTH_POSES),
        initial=optional(initial_path),
        directory=directory,
    )
