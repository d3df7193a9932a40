"""
Rigid-body transforms parameterized in the Lie algebra se(3).

Conventions used throughout the package:
    - ``xi = [rho, phi]``: translation part first (mm), rotation part second
      (axis-angle, radians).
    - A pose is the world-to-frame transform T(xi): it maps panorama/world
      millimetre coordinates into the millimetre coordinates of one frame.
    - Increments are left-multiplicative: T <- exp(hat(delta)) . T, which
      gives the warp Jacobian [I | -skew(T p)].
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.utils.validation import InvalidInputError

SMALL_ANGLE = 1e-8

CONVENTION = "world-to-frame, left-increment, mm"


def skew(v: Sequence[float]) -> np.ndarray:
    """3x3 cross-product matrix of ``v``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rodrigues_terms(theta: float) -> Tuple[float, float, float]:
    """Coefficients A, B, C of R = I + A K + B K^2 and V = I + B K + C K^2."""
    if theta < SMALL_ANGLE:
        return 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0, 1.0 / 6.0 - theta**2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def exp_map(xi: Sequence[float]) -> np.ndarray:
    """Exponential map se(3) -> SE(3) as a 4x4 homogeneous matrix."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (6,):
        raise InvalidInputError(f"xi must be a 6-vector, got shape {xi.shape}")
    rho, phi = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    a, b, c = _rodrigues_terms(theta)
    k = skew(phi)
    k2 = k @ k
    T = np.eye(4)
    T[:3, :3] = np.eye(3) + a * k + b * k2
    T[:3, 3] = (np.eye(3) + b * k + c * k2) @ rho
    return T


def log_map(T: np.ndarray) -> np.ndarray:
    """Logarithm SE(3) -> se(3), inverse of :func:`exp_map` for |phi| < pi."""
    T = np.asarray(T, dtype=np.float64)
    phi = Rotation.from_matrix(T[:3, :3]).as_rotvec()
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        v_inv = np.eye(3) - 0.5 * k + (k @ k) / 12.0
    else:
        a, b, _ = _rodrigues_terms(theta)
        v_inv = np.eye(3) - 0.5 * k + (1.0 - a / (2.0 * b)) / theta**2 * (k @ k)
    return np.concatenate([v_inv @ T[:3, 3], phi])


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Immutable rigid pose.

    Attributes:
        xi: 6-vector [translation mm, rotation rad]
        matrix: cached 4x4 transform, always exp_map(xi)

    Usage:
        pose = Pose.from_xi([5, 0, 0, 0, 0, 0])
        moved = apply_increment(pose, delta)
    """

    xi: np.ndarray
    matrix: np.ndarray = field(repr=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(_frozen(np.zeros(6)), _frozen(np.eye(4)))

    @classmethod
    def from_xi(cls, xi: Sequence[float]) -> "Pose":
        xi = np.asarray(xi, dtype=np.float64)
        return cls(_frozen(xi), _frozen(exp_map(xi)))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        """Pose whose xi is log(T); the cached matrix is re-derived as exp(xi)."""
        return cls.from_xi(log_map(T))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "Pose":
        R, t = self.rotation, self.translation
        T = np.eye(4)
        T[:3, :3] = R.T
        T[:3, 3] = -R.T @ t
        return Pose.from_matrix(T)

    def compose(self, other: "Pose") -> "Pose":
        """self . other (apply ``other`` first)."""
        return Pose.from_matrix(self.matrix @ other.matrix)


def warp(pose: Pose, p: Sequence[float]) -> np.ndarray:
    """p_ij = T(xi) p_j for a single 3D point."""
    return pose.rotation @ np.asarray(p, dtype=np.float64) + pose.translation


def warp_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`warp` for an (N, 3) array."""
    points = np.asarray(points, dtype=np.float64)
    return points @ pose.rotation.T + pose.translation


def warp_jacobian(pose: Pose, p: Sequence[float]) -> np.ndarray:
    """3x6 derivative of the warped point w.r.t. a left increment: [I | -skew(T p)]."""
    J = np.zeros((3, 6))
    J[:, :3] = np.eye(3)
    J[:, 3:] = -skew(warp(pose, p))
    return J


def apply_increment(pose: Pose, delta: Sequence[float]) -> Pose:
    """exp(hat(delta)) . T, re-expressed through log so xi and matrix agree."""
    delta = np.asarray(delta, dtype=np.float64)
    if not np.any(delta):
        return pose
    return Pose.from_matrix(exp_map(delta) @ pose.matrix)


def pose_from_euler(
    angles_deg: Sequence[float], translation: Sequence[float] = (0.0, 0.0, 0.0)
) -> Pose:
    """Pose from per-axis (x, y, z) rotation angles in degrees, composed as ZYX."""
    ax, ay, az = angles_deg
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("ZYX", [az, ay, ax], degrees=True).as_matrix()
    T[:3, 3] = np.asarray(translation, dtype=np.float64)
    return Pose.from_matrix(T)


def euler_zyx(R: np.ndarray) -> np.ndarray:
    """(yaw, pitch, roll) in radians with R = Rz(yaw) Ry(pitch) Rx(roll)."""
    return Rotation.from_matrix(np.asarray(R)).as_euler("ZYX")


@dataclass(frozen=True, eq=False)
class PoseSet:
    """
    Ordered poses of all frames plus the gauge anchors.

    Attributes:
        poses: one Pose per frame
        anchored: True for frames excluded from the solve (gauge fixing)
    """

    poses: Tuple[Pose, ...]
    anchored: Tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "anchored", tuple(bool(a) for a in self.anchored))
        if len(self.poses) != len(self.anchored):
            raise InvalidInputError(
                f"PoseSet: {len(self.poses)} poses but {len(self.anchored)} anchor flags"
            )
        if not self.poses:
            raise InvalidInputError("PoseSet cannot be empty")

    @classmethod
    def anchored_at(cls, poses: Iterable[Pose], index: Optional[int] = 0) -> "PoseSet":
        poses = tuple(poses)
        return cls(poses, tuple(i == index for i in range(len(poses))))

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, index: int) -> Pose:
        return self.poses[index]

    def __iter__(self):
        return iter(self.poses)

    @property
    def free_indices(self) -> List[int]:
        return [i for i, a in enumerate(self.anchored) if not a]

    def replace(self, index: int, pose: Pose) -> "PoseSet":
        poses = list(self.poses)
        poses[index] = pose
        return PoseSet(tuple(poses), self.anchored)

    def with_increments(self, delta: np.ndarray, scale: float = 1.0) -> "PoseSet":
        """Apply ``scale * delta`` (6 entries per free frame, in free order)."""
        poses = list(self.poses)
        for k, i in enumerate(self.free_indices):
            poses[i] = apply_increment(poses[i], scale * delta[6 * k : 6 * k + 6])
        return PoseSet(tuple(poses), self.anchored)

    def xi_array(self) -> np.ndarray:
        return np.stack([p.xi for p in self.poses])

    def matrices(self) -> np.ndarray:
        """(m, 4, 4) stack of the world-to-frame transforms."""
        return np.stack([p.matrix for p in self.poses])
