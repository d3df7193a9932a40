"""
Accuracy, objective and field-of-view metrics for completed runs.

Pose errors are measured on frame-to-world transforms (the inverses of
the stored world-to-frame poses). Simultaneous registration fixes these
only up to one common rigid motion applied on the left, so estimates are
first aligned on frame 0: aligned_k = G0_truth . G0_est^-1 . G_est_k.
The error of frame k is then G_truth_k^-1 . aligned_k, reported as a
translation in panorama voxels and ZYX (yaw, pitch, roll) angles.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.registration.residuals import build_observations, profiled_objective
from src.registration.se3 import Pose, PoseSet, euler_zyx
from src.registration.volume import PanoramaGrid, Volume3
from src.utils.validation import InvalidInputError, ensure_same_length, ensure_triple

logger = logging.getLogger(__name__)

ALIGNMENT_CONVENTION = (
    "frame-to-world poses left-aligned on frame 0; translation in panorama voxels; "
    "euler=ZYX (yaw, pitch, roll) radians; MAE = mean over frames x axes"
)


@dataclass
class PoseErrorSummary:
    """
    Per-frame and mean absolute pose errors after gauge alignment.

    Attributes:
        translation_errors: (m, 3) per-axis translation errors in voxels
        rotation_errors: (m, 3) ZYX Euler-angle errors in radians
        mae_translation: mean of |translation_errors|
        mae_rotation: mean of |rotation_errors|
        alignment_convention: how the errors were aligned and expressed
    """

    translation_errors: np.ndarray
    rotation_errors: np.ndarray
    mae_translation: float
    mae_rotation: float
    alignment_convention: str = ALIGNMENT_CONVENTION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mae_translation_vox": self.mae_translation,
            "mae_rotation_rad": self.mae_rotation,
            "alignment_convention": self.alignment_convention,
        }


@dataclass
class FovGainReport:
    """Fused coverage relative to the first frame's valid voxels."""

    fused_voxel_count: int
    single_frame_voxel_count: int
    ratio: float = field(init=False)

    def __post_init__(self):
        self.ratio = self.fused_voxel_count / self.single_frame_voxel_count

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fused_voxel_count": self.fused_voxel_count,
            "single_frame_voxel_count": self.single_frame_voxel_count,
            "ratio": self.ratio,
        }


def _poses(poses: Any) -> List[Pose]:
    return list(poses.poses if isinstance(poses, PoseSet) else poses)


def pose_errors(
    estimated: Any, truth: Any, voxel_size: Sequence[float] = (1.0, 1.0, 1.0)
) -> PoseErrorSummary:
    """Gauge-aligned per-frame errors and their MAEs.

    Args:
        estimated: PoseSet or sequence of estimated world-to-frame poses
        truth: PoseSet or sequence of true world-to-frame poses
        voxel_size: panorama spacing (mm) used to express translations in voxels

    Raises:
        InvalidInputError: on a length mismatch or differing anchors
    """
    est, ref = _poses(estimated), _poses(truth)
    ensure_same_length(est, ref, "pose_errors estimated/truth")
    if not est:
        raise InvalidInputError("pose_errors: empty pose sets")
    if isinstance(estimated, PoseSet) and isinstance(truth, PoseSet):
        if estimated.anchored != truth.anchored:
            raise InvalidInputError("pose_errors: pose sets are anchored on different frames")
    voxel = np.asarray(ensure_triple(voxel_size, "voxel_size", positive=True))

    est_g = [p.inverse().matrix for p in est]
    ref_g = [p.inverse().matrix for p in ref]
    gauge = ref_g[0] @ np.linalg.inv(est_g[0])
    translation = np.zeros((len(est), 3))
    rotation = np.zeros((len(est), 3))
    for k, (g_est, g_ref) in enumerate(zip(est_g, ref_g)):
        error = np.linalg.inv(g_ref) @ gauge @ g_est
        translation[k] = error[:3, 3] / voxel
        rotation[k] = euler_zyx(error[:3, :3])
    return PoseErrorSummary(
        translation_errors=translation,
        rotation_errors=rotation,
        mae_translation=float(np.abs(translation).mean()),
        mae_rotation=float(np.abs(rotation).mean()),
    )


def objective_of(frames: Sequence[Volume3], poses: Any, grid: PanoramaGrid) -> float:
    """Sum of squared differences with the panorama at the per-voxel mean.

    Raises:
        NoOverlapError: if no voxel is observed
    """
    obs = build_observations(frames, None, _poses(poses), grid, with_jacobian=False)
    return profiled_objective(obs)


def fov_gain(counts: Volume3, frame0: Volume3) -> FovGainReport:
    """Observed panorama voxels over the valid voxels of the first frame.

    Raises:
        InvalidInputError: if frame 0 has no valid voxel
    """
    single = frame0.valid_count
    if single == 0:
        raise InvalidInputError("fov_gain: frame 0 has no valid voxel")
    fused = int(np.count_nonzero(counts.data >= 1))
    report = FovGainReport(fused, single)
    logger.debug(f"FoV gain {report.ratio:.3f} ({fused} / {single} voxels)")
    return report


def objective_dominance(values: Dict[str, float], reference: str = "dsr") -> Dict[str, bool]:
    """For each method, whether ``reference`` reached an objective no larger than it."""
    if reference not in values:
        return {}
    best = values[reference]
    return {name: best <= value for name, value in values.items() if name != reference}


def summarize(
    estimated: Optional[Any],
    truth: Optional[Any],
    frames: Sequence[Volume3],
    grid: PanoramaGrid,
    counts: Optional[Volume3] = None,
) -> Dict[str, Any]:
    """Every metric available for a run; pose errors need ``truth``."""
    summary: Dict[str, Any] = {"objective": objective_of(frames, estimated, grid)}
    if truth is not None:
        summary["pose_errors"] = pose_errors(estimated, truth, grid.spacing).to_dict()
    if counts is not None:
        summary["fov_gain"] = fov_gain(counts, frames[0]).to_dict()
    return summary
