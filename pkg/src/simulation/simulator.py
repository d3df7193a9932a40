"""
Synthetic sequence generator with known ground truth.

A source phantom is imaged by a moving transducer: a random pose trajectory
is sampled, one restricted field-of-view sub-volume is extracted per
pose, and Gaussian noise is added on a 0-255 intensity scale.

Every random draw comes from a generator seeded with
``[seed, frame, attempt, stream]``, so a sequence is reproducible
bit-exactly from (phantom, protocol) and per-frame retries never shift
the draws of other frames.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.registration.se3 import Pose, PoseSet, pose_from_euler, warp_points
from src.registration.volume import Volume3, sample_points, visible_points
from src.utils.validation import (
    ConfigError,
    InvalidInputError,
    NoOverlapError,
    ensure_dims,
    ensure_triple,
)

logger = logging.getLogger(__name__)

PhantomKind = Literal["smooth-blobs", "shell", "checker-smoothed"]
PHANTOM_KINDS = ("smooth-blobs", "shell", "checker-smoothed")
MIN_PHANTOM_DIM = 16
INTENSITY_MAX = 255.0

# generator stream ids
_MOTION, _NOISE, _INIT = 0, 1, 2


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def centred_origin(dims: Sequence[int], spacing: Sequence[float]) -> Tuple[float, float, float]:
    """Origin that puts the volume centre at world (0, 0, 0)."""
    return tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))  # type: ignore[return-value]


@dataclass
class FieldOfView:
    """
    Frame geometry of the simulated transducer.

    Attributes:
        dims: frame voxels per axis
        spacing: mm per voxel
        frustum_angle_deg: opening angle of the truncated-pyramid mask
            along z (None = full box)
    """

    dims: Tuple[int, int, int] = (48, 48, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    frustum_angle_deg: Optional[float] = None

    def __post_init__(self):
        self.dims = ensure_dims(self.dims, "frame_dims", minimum=2)
        self.spacing = ensure_triple(self.spacing, "spacing", positive=True)  # type: ignore[assignment]
        if self.frustum_angle_deg is not None and not 0 < self.frustum_angle_deg < 180:
            raise ConfigError(
                f"must be in (0, 180), got {self.frustum_angle_deg}",
                key_path="simulation.frustum_angle_deg",
            )

    @property
    def origin(self) -> Tuple[float, float, float]:
        return centred_origin(self.dims, self.spacing)

    def mask(self) -> Optional[np.ndarray]:
        """Truncated-pyramid validity mask, apex side at z = 0 (None for a box FoV)."""
        if self.frustum_angle_deg is None:
            return None
        nx, ny, nz = self.dims
        x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
        slope = math.tan(math.radians(self.frustum_angle_deg) / 2.0)
        top = 0.25 * min(cx, cy)
        half_width = top + z * slope
        return (np.abs(x - cx) <= half_width) & (np.abs(y - cy) <= half_width)


@dataclass
class SimProtocol:
    """
    Acquisition protocol of a simulated sequence.

    Attributes:
        n_frames: frames in the sequence
        rot_range_deg: per-axis bound on the rotation between consecutive frames
        trans_range_vox: per-axis bound on the translation between consecutive frames
        noise_std: additive Gaussian noise std on the 0-255 scale
        frame_dims: frame voxels per axis
        frustum_angle_deg: truncated-pyramid FoV angle (None = box)
        trajectory: "random" or "sweep" (constant +x step, random rotations)
        init_perturbation_scale: initial-guess error as a fraction of the ranges
        min_valid_fraction: smallest accepted share of valid voxels per frame
        max_retries: draws tried per frame before giving up
        seed: master seed
    """

    n_frames: int = 11
    rot_range_deg: float = 12.0
    trans_range_vox: float = 15.0
    noise_std: float = 25.0
    frame_dims: Tuple[int, int, int] = (48, 48, 48)
    frustum_angle_deg: Optional[float] = None
    trajectory: Literal["random", "sweep"] = "random"
    init_perturbation_scale: float = 0.5
    min_valid_fraction: float = 0.5
    max_retries: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError(f"must be >= 2, got {self.n_frames}", key_path="simulation.n_frames")
        for name in ("rot_range_deg", "trans_range_vox", "noise_std", "init_perturbation_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(
                    f"must be >= 0, got {getattr(self, name)}", key_path=f"simulation.{name}"
                )
        if self.trajectory not in ("random", "sweep"):
            raise ConfigError(
                f"must be 'random' or 'sweep', got {self.trajectory!r}",
                key_path="simulation.trajectory",
            )
        if not 0 < self.min_valid_fraction <= 1:
            raise ConfigError(
                f"must be in (0, 1], got {self.min_valid_fraction}",
                key_path="simulation.min_valid_fraction",
            )
        if self.max_retries < 1:
            raise ConfigError(
                f"must be >= 1, got {self.max_retries}", key_path="simulation.max_retries"
            )
        self.frame_dims = tuple(int(d) for d in self.frame_dims)  # type: ignore[assignment]

    def fov(self, spacing: Sequence[float]) -> FieldOfView:
        return FieldOfView(self.frame_dims, tuple(spacing), self.frustum_angle_deg)  # type: ignore[arg-type]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class GroundTruthSequence:
    """
    Simulated frames with their true and initial poses.

    Attributes:
        frames: one noisy Volume3 per frame
        true_poses: world-to-frame ground truth (frame 0 = identity)
        initial_poses: ground truth composed with the initial-guess perturbation
        protocol: protocol that produced the sequence
        source_id: phantom descriptor
        attempts: retry attempt actually used for each frame
    """

    frames: List[Volume3]
    true_poses: PoseSet
    initial_poses: PoseSet
    protocol: SimProtocol
    source_id: str = "custom"
    attempts: List[int] = field(default_factory=list)

    def sub_seeds(self) -> List[List[int]]:
        """Generator keys of the accepted motion draw per frame."""
        return [[self.protocol.seed, k, a, _MOTION] for k, a in enumerate(self.attempts)]


# =============================================================================
# Phantoms
# =============================================================================


def _normalized(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo) * INTENSITY_MAX


def _blobs(dims: Sequence[int], rng: np.random.Generator, count: int = 24) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    out = np.zeros(tuple(dims))
    scale = min(dims)
    for _ in range(count):
        centre = rng.uniform(0, 1, 3) * (np.asarray(dims) - 1)
        sigma = rng.uniform(0.06, 0.15) * scale
        amplitude = rng.uniform(-1.0, 1.0)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
        out += amplitude * np.exp(-r2 / (2.0 * sigma**2))
    return out


def make_phantom(
    dims: Sequence[int],
    kind: PhantomKind = "smooth-blobs",
    seed: int = 0,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
) -> Volume3:
    """Deterministic synthetic source volume in [0, 255] with centred origin.

    Kinds:
        smooth-blobs: sum of random Gaussian bumps
        shell: thick ellipsoidal wall around an exactly-zero cavity
        checker-smoothed: blurred 8-voxel checkerboard

    Raises:
        InvalidInputError: if any dim is below 16 or the kind is unknown
    """
    dims = ensure_dims(dims)
    if min(dims) < MIN_PHANTOM_DIM:
        raise InvalidInputError(f"Phantom dims must be >= {MIN_PHANTOM_DIM} per axis, got {dims}")
    if kind not in PHANTOM_KINDS:
        raise InvalidInputError(f"Unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    rng = np.random.default_rng(seed)

    if kind == "smooth-blobs":
        data = _normalized(_blobs(dims, rng))
    elif kind == "shell":
        centre = (np.asarray(dims) - 1) / 2.0
        radii = rng.uniform(0.35, 0.42, 3) * np.asarray(dims)
        grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
        r = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, radii)))
        wall = (r >= 0.6) & (r <= 1.0)
        texture = _normalized(_blobs(dims, rng, count=12)) / INTENSITY_MAX
        data = np.where(wall, 150.0 + 80.0 * texture, 30.0 + 40.0 * texture)
        data = ndimage.gaussian_filter(data, sigma=1.5, mode="nearest")
        data[r < 0.6] = 0.0
    else:
        idx = (np.indices(dims) // 8).sum(axis=0)
        checker = np.where(np.mod(idx, 2) == 0, 50.0, 200.0)
        data = ndimage.gaussian_filter(checker, sigma=2.0, mode="nearest")

    data = np.clip(data, 0.0, INTENSITY_MAX)
    spacing = ensure_triple(spacing, "spacing", positive=True)
    return Volume3(data, spacing, centred_origin(dims, spacing))


# =============================================================================
# Trajectory and extraction
# =============================================================================


def _relative_motion(
    protocol: SimProtocol, seed: int, frame: int, attempt: int, spacing: Sequence[float]
) -> Pose:
    """Frame-k to frame-(k-1) motion: uniform per-axis angles and translations."""
    rng = _rng(seed, frame, attempt, _MOTION)
    angles = rng.uniform(-protocol.rot_range_deg, protocol.rot_range_deg, 3)
    if protocol.trajectory == "sweep":
        shift = np.array([protocol.trans_range_vox, 0.0, 0.0])
    else:
        shift = rng.uniform(-protocol.trans_range_vox, protocol.trans_range_vox, 3)
    return pose_from_euler(angles, shift * np.asarray(spacing))


def _next_pose(previous: Pose, motion: Pose) -> Pose:
    # frame-to-world G_k = G_{k-1} . motion, so T_k = motion^-1 . T_{k-1}
    return motion.inverse().compose(previous)


def sample_trajectory(
    protocol: SimProtocol, seed: Optional[int] = None, spacing: Sequence[float] = (1.0, 1.0, 1.0)
) -> PoseSet:
    """World-to-frame poses: frame 0 at identity, each next frame moved by one random draw."""
    seed = protocol.seed if seed is None else seed
    poses = [Pose.identity()]
    for k in range(1, protocol.n_frames):
        poses.append(_next_pose(poses[-1], _relative_motion(protocol, seed, k, 0, spacing)))
    return PoseSet.anchored_at(poses, 0)


def extract_frame(source: Volume3, pose: Pose, fov: FieldOfView) -> Volume3:
    """Resample ``source`` into the frame seen under world-to-frame ``pose``.

    Voxels outside the source or outside the frustum are 0 and flagged
    invalid in the frame's mask.

    Raises:
        NoOverlapError: if no frame voxel lands inside the source
    """
    nx, ny, nz = fov.dims
    idx = np.stack(
        [a.ravel(order="F") for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")],
        axis=1,
    ).astype(np.float64)
    local = np.asarray(fov.origin) + np.asarray(fov.spacing) * idx
    world = warp_points(pose.inverse(), local)
    values, inside = sample_points(source, source.world_to_voxel(world))
    valid = inside.reshape(fov.dims, order="F")
    frustum = fov.mask()
    if frustum is not None:
        valid &= frustum
    if not valid.any():
        raise NoOverlapError("Frame field of view does not intersect the source volume")
    data = np.where(valid, values.reshape(fov.dims, order="F"), 0.0)
    return Volume3(data, fov.spacing, fov.origin, None if valid.all() else valid)


def add_noise(frame: Volume3, std: float, seed: Any) -> Volume3:
    """i.i.d. Gaussian noise on the valid voxels, clamped to [0, 255]."""
    if std < 0:
        raise ConfigError(f"must be >= 0, got {std}", key_path="simulation.noise_std")
    if std == 0:
        return frame
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, std, frame.dims)
    if frame.mask is not None:
        noise = np.where(frame.mask, noise, 0.0)
    return frame.with_data(np.clip(frame.data + noise, 0.0, INTENSITY_MAX))


def perturb_poses(truth: PoseSet, protocol: SimProtocol, spacing: Sequence[float]) -> PoseSet:
    """Initial guesses: every non-anchored true pose left-composed with a random error."""
    scale = protocol.init_perturbation_scale
    poses = list(truth.poses)
    for k in truth.free_indices:
        rng = _rng(protocol.seed, k, 0, _INIT)
        angles = rng.uniform(-1.0, 1.0, 3) * scale * protocol.rot_range_deg
        shift = rng.uniform(-1.0, 1.0, 3) * scale * protocol.trans_range_vox
        poses[k] = pose_from_euler(angles, shift * np.asarray(spacing)).compose(poses[k])
    return PoseSet(tuple(poses), truth.anchored)


def _overlaps(previous: Volume3, previous_pose: Pose, frame: Volume3, pose: Pose) -> bool:
    """True if some valid voxel of ``frame`` is visible in ``previous``."""
    idx = np.argwhere(frame.mask) if frame.mask is not None else np.argwhere(np.ones(frame.dims, bool))
    world = warp_points(pose.inverse(), frame.voxel_to_world(idx))
    points = previous.world_to_voxel(warp_points(previous_pose, world))
    return bool(visible_points(previous, points).any())


def simulate_sequence(
    source: Volume3, protocol: SimProtocol, source_id: str = "custom"
) -> GroundTruthSequence:
    """Full pipeline: trajectory, extraction, overlap/coverage checks, noise.

    A frame whose draw leaves too few valid voxels or no overlap with its
    predecessor is redrawn with the next attempt key.

    Raises:
        NoOverlapError: if a frame cannot be placed within ``max_retries``
    """
    fov = protocol.fov(source.spacing)
    min_valid = protocol.min_valid_fraction * float(np.prod(fov.dims))
    clean: List[Volume3] = []
    poses: List[Pose] = []
    attempts: List[int] = []

    for k in range(protocol.n_frames):
        tries = 1 if k == 0 else protocol.max_retries
        for attempt in range(tries):
            if k == 0:
                pose = Pose.identity()
            else:
                motion = _relative_motion(protocol, protocol.seed, k, attempt, source.spacing)
                pose = _next_pose(poses[-1], motion)
            try:
                frame = extract_frame(source, pose, fov)
            except NoOverlapError:
                continue
            if frame.valid_count < min_valid:
                continue
            if k > 0 and not _overlaps(clean[-1], poses[-1], frame, pose):
                continue
            break
        else:
            raise NoOverlapError(
                f"Frame {k}: no acceptable pose after {tries} attempts"
            )
        if attempt > 0:
            logger.info(f"Frame {k}: accepted on retry {attempt}")
        clean.append(frame)
        poses.append(pose)
        attempts.append(attempt)

    frames = [
        add_noise(frame, protocol.noise_std, [protocol.seed, k, attempts[k], _NOISE])
        for k, frame in enumerate(clean)
    ]
    truth = PoseSet.anchored_at(poses, 0)
    logger.info(f"Simulated {len(frames)} frames from {source_id} (seed {protocol.seed})")
    return GroundTruthSequence(
        frames=frames,
        true_poses=truth,
        initial_poses=perturb_poses(truth, protocol, source.spacing),
        protocol=protocol,
        source_id=source_id,
        attempts=attempts,
    )
