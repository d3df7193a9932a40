"""
3D scalar volumes: container, trilinear sampling, gradient fields,
Gaussian pyramids and mean fusion onto a panorama grid.

Arrays are indexed ``data[x, y, z]`` with shape ``dims``; flattened
panorama indices are x-fastest (``j = x + nx * (y + ny * z)``), matching
the on-disk payload order.

Interpolable domain: a continuous voxel coordinate p is inside iff
``0 <= p_k <= dims_k - 1`` on every axis. Points outside are reported
through a boolean mask, never an exception.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.registration.se3 import Pose, warp_points
from src.utils.validation import (
    ConfigError,
    InvalidInputError,
    InvalidVolumeError,
    ensure_dims,
    ensure_same_length,
    ensure_triple,
)

logger = logging.getLogger(__name__)

PYRAMID_KERNEL = np.array([0.25, 0.5, 0.25])
MIN_PYRAMID_DIM = 4
MASK_TOLERANCE = 1e-6


def _readonly(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Volume3:
    """
    Immutable 3D scalar volume with world geometry.

    Attributes:
        data: float32 intensities indexed [x, y, z]
        spacing: mm per voxel along x, y, z
        origin: world position (mm) of voxel (0, 0, 0)
        mask: optional validity mask (True = valid); None means all valid
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise InvalidVolumeError(f"Volume data must be 3D, got {data.ndim}D")
        if min(data.shape) < 1:
            raise InvalidVolumeError(f"Volume dims must be positive, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidVolumeError("Volume intensities must be finite")
        try:
            spacing = ensure_triple(self.spacing, "spacing", positive=True)
            origin = ensure_triple(self.origin, "origin")
        except InvalidInputError as exc:
            raise InvalidVolumeError(str(exc)) from exc
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, copy=True)
            if mask.shape != data.shape:
                raise InvalidVolumeError(
                    f"Mask shape {mask.shape} does not match volume dims {data.shape}"
                )
            object.__setattr__(self, "mask", _readonly(mask))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def valid_count(self) -> int:
        return self.size if self.mask is None else int(self.mask.sum())

    @cached_property
    def mask_weights(self) -> Optional[np.ndarray]:
        return None if self.mask is None else self.mask.astype(np.float64)

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * np.asarray(idx, dtype=np.float64)

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def with_data(self, data: np.ndarray, mask: Optional[np.ndarray] = None) -> "Volume3":
        """Same geometry, new intensities (mask kept unless given)."""
        return Volume3(data, self.spacing, self.origin, self.mask if mask is None else mask)


@dataclass(frozen=True, eq=False)
class GradientField:
    """Per-voxel intensity gradient (intensity units per voxel) of a Volume3."""

    gx: np.ndarray
    gy: np.ndarray
    gz: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.gx.shape)  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class PanoramaGrid:
    """
    Voxel grid of the panoramic image M (geometry only).

    Attributes:
        dims: voxels per axis
        spacing: mm per voxel
        origin: world position of voxel (0, 0, 0)
        margin_voxels: padding added around the warped frame corners
    """

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    margin_voxels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dims", ensure_dims(self.dims))
        object.__setattr__(self, "spacing", ensure_triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", ensure_triple(self.origin, "origin"))
        if self.margin_voxels < 0:
            raise InvalidInputError(f"margin_voxels must be >= 0, got {self.margin_voxels}")

    @classmethod
    def like(cls, vol: Volume3, margin_voxels: int = 0) -> "PanoramaGrid":
        """Grid congruent to ``vol``."""
        return cls(vol.dims, vol.spacing, vol.origin, margin_voxels)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def unravel(self, flat: np.ndarray) -> np.ndarray:
        """(N, 3) integer voxel indices of x-fastest flat indices."""
        nx, ny, _ = self.dims
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack([flat % nx, (flat // nx) % ny, flat // (nx * ny)], axis=1)

    def ravel(self, idx: np.ndarray) -> np.ndarray:
        nx, ny, _ = self.dims
        idx = np.asarray(idx, dtype=np.int64)
        return idx[:, 0] + nx * (idx[:, 1] + ny * idx[:, 2])

    def voxel_world(self, flat: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * self.unravel(flat)

    def coarsened(self, factor: int) -> "PanoramaGrid":
        """Grid for a pyramid level: spacing times ``factor``, same origin."""
        if factor == 1:
            return self
        dims = tuple(max(1, math.ceil(d / factor)) for d in self.dims)
        spacing = tuple(s * factor for s in self.spacing)
        return PanoramaGrid(dims, spacing, self.origin, self.margin_voxels)

    def reshape(self, flat_values: np.ndarray) -> np.ndarray:
        return np.asarray(flat_values).reshape(self.dims, order="F")

    def flatten(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).ravel(order="F")


# =============================================================================
# Sampling
# =============================================================================


def inside_domain(dims: Sequence[int], points: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside [0, dims_k - 1] on every axis."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    upper = np.asarray(dims, dtype=np.float64) - 1.0
    return np.all((points >= 0.0) & (points <= upper), axis=1)


def _interpolate(array: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear blend at in-domain points; reads clamp only at the exact upper face."""
    if len(points) == 0:
        return np.zeros(0)
    return ndimage.map_coordinates(
        array, points.T, order=1, mode="nearest", prefilter=False, output=np.float64
    )


def sample_points(vol: Volume3, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized trilinear sampling.

    Returns:
        (values, inside): values are 0 where ``inside`` is False
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside = inside_domain(vol.dims, points)
    values = np.zeros(len(points))
    values[inside] = _interpolate(vol.data, points[inside])
    return values, inside


def sample_trilinear(vol: Volume3, p: Sequence[float]) -> Optional[float]:
    """Trilinear intensity at a continuous voxel coordinate, or None outside the domain."""
    values, inside = sample_points(vol, np.asarray(p, dtype=np.float64)[None, :])
    return float(values[0]) if inside[0] else None


def visible_points(vol: Volume3, points: np.ndarray) -> np.ndarray:
    """sigma for every point: inside the domain and not touching an invalid voxel."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    visible = inside_domain(vol.dims, points)
    if vol.mask_weights is not None and visible.any():
        weight = _interpolate(vol.mask_weights, points[visible])
        visible[np.flatnonzero(visible)[weight < 1.0 - 1e-9]] = False
    return visible


def gradient_field(vol: Volume3) -> GradientField:
    """Central differences inside, one-sided differences on the faces."""
    if min(vol.dims) < 2:
        raise InvalidVolumeError(f"gradient_field needs dims >= 2 per axis, got {vol.dims}")
    data = vol.data.astype(np.float64)
    if vol.mask is not None and not vol.mask.all() and vol.mask.any():
        nearest = ndimage.distance_transform_edt(
            ~vol.mask, return_distances=False, return_indices=True
        )
        data = data[tuple(nearest)]
    gx, gy, gz = np.gradient(data, edge_order=1)
    return GradientField(_readonly(gx), _readonly(gy), _readonly(gz), vol.spacing, vol.origin)


def sample_gradient_points(gf: GradientField, points: np.ndarray) -> np.ndarray:
    """(N, 3) componentwise trilinear gradients; rows outside the domain are 0."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside = inside_domain(gf.dims, points)
    out = np.zeros((len(points), 3))
    for k, component in enumerate((gf.gx, gf.gy, gf.gz)):
        out[inside, k] = _interpolate(component, points[inside])
    return out


def sample_gradient(gf: GradientField, p: Sequence[float]) -> Optional[np.ndarray]:
    """Interpolated gradient 3-vector, or None outside the domain."""
    p = np.asarray(p, dtype=np.float64)[None, :]
    if not inside_domain(gf.dims, p)[0]:
        return None
    return sample_gradient_points(gf, p)[0]


# =============================================================================
# Pyramid
# =============================================================================


def _smooth(array: np.ndarray) -> np.ndarray:
    out = np.asarray(array, dtype=np.float64)
    for axis in range(3):
        out = ndimage.correlate1d(out, PYRAMID_KERNEL, axis=axis, mode="nearest")
    return out


def pyramid_dims(dims: Sequence[int], levels: int) -> List[Tuple[int, ...]]:
    shapes = [tuple(dims)]
    for _ in range(levels - 1):
        shapes.append(tuple(math.ceil(d / 2) for d in shapes[-1]))
    return shapes


def build_pyramid(vol: Volume3, levels: int) -> List[Volume3]:
    """Level 0 is ``vol``; each next level is smoothed (1/4, 1/2, 1/4) and decimated by 2."""
    if levels < 1:
        raise ConfigError(f"must be >= 1, got {levels}", key_path="pyramid_levels")
    coarsest = pyramid_dims(vol.dims, levels)[-1]
    if levels > 1 and min(coarsest) < MIN_PYRAMID_DIM:
        raise ConfigError(
            f"{levels} levels would shrink {vol.dims} to {coarsest} "
            f"(minimum {MIN_PYRAMID_DIM} per axis)",
            key_path="pyramid_levels",
        )
    pyramid = [vol]
    for _ in range(levels - 1):
        fine = pyramid[-1]
        data = _smooth(fine.data)[::2, ::2, ::2]
        mask = None
        if fine.mask is not None:
            mask = _smooth(fine.mask)[::2, ::2, ::2] >= 1.0 - MASK_TOLERANCE
        spacing = tuple(2.0 * s for s in fine.spacing)
        pyramid.append(Volume3(data, spacing, fine.origin, mask))
    return pyramid


# =============================================================================
# Panorama grid and fusion
# =============================================================================


def frame_corners(vol: Volume3) -> np.ndarray:
    """World (frame-local mm) positions of the 8 domain corners."""
    upper = np.asarray(vol.dims, dtype=np.float64) - 1.0
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    return vol.voxel_to_world(corners * upper)


def compute_panorama_grid(
    frames: Sequence[Volume3],
    poses: Sequence[Pose],
    margin_voxels: int = 2,
    spacing: Optional[Sequence[float]] = None,
) -> PanoramaGrid:
    """Axis-aligned box around every frame's corners pulled back to the world."""
    if not frames:
        raise InvalidInputError("compute_panorama_grid: no frames")
    ensure_same_length(frames, list(poses), "compute_panorama_grid frames/poses")
    spacing = np.asarray(spacing if spacing is not None else frames[0].spacing, dtype=np.float64)
    world = np.concatenate(
        [warp_points(pose.inverse(), frame_corners(frame)) for frame, pose in zip(frames, poses)]
    )
    lo = world.min(axis=0) - margin_voxels * spacing
    hi = world.max(axis=0) + margin_voxels * spacing
    dims = tuple(int(math.ceil((h - l) / s - 1e-6)) + 1 for l, h, s in zip(lo, hi, spacing))
    return PanoramaGrid(dims, tuple(spacing), tuple(lo), margin_voxels)


def frame_candidates(grid: PanoramaGrid, frame: Volume3, pose: Pose) -> np.ndarray:
    """Flat indices of panorama voxels in the box covered by ``frame`` under ``pose``."""
    world = warp_points(pose.inverse(), frame_corners(frame))
    idx = (world - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    lo = np.maximum(np.floor(idx.min(axis=0)).astype(np.int64), 0)
    hi = np.minimum(np.ceil(idx.max(axis=0)).astype(np.int64), np.asarray(grid.dims) - 1)
    if np.any(lo > hi):
        return np.zeros(0, dtype=np.int64)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    stacked = np.stack([m.ravel(order="F") for m in mesh], axis=1)
    return grid.ravel(stacked)


def warp_into_frame(
    grid: PanoramaGrid, frame: Volume3, pose: Pose, voxels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Warped world points (frame mm) and frame voxel coordinates of panorama voxels."""
    warped = warp_points(pose, grid.voxel_world(voxels))
    return warped, frame.world_to_voxel(warped)


def frame_samples(
    grid: PanoramaGrid, frame: Volume3, pose: Pose
) -> Tuple[np.ndarray, np.ndarray]:
    """Flat indices of the panorama voxels ``frame`` sees and the intensities it sees there."""
    voxels = frame_candidates(grid, frame, pose)
    _, points = warp_into_frame(grid, frame, pose, voxels)
    visible = visible_points(frame, points)
    values, _ = sample_points(frame, points[visible])
    return voxels[visible], values


def fuse(
    frames: Sequence[Volume3], poses: Sequence[Pose], grid: PanoramaGrid
) -> Tuple[Volume3, Volume3]:
    """Mean of every observing frame at each panorama voxel.

    Returns:
        (fused, counts): unobserved voxels carry intensity 0 and count 0
    """
    if not frames:
        raise InvalidInputError("fuse: empty frame list")
    poses = list(poses)
    ensure_same_length(frames, poses, "fuse frames/poses")
    sums = np.zeros(grid.size)
    counts = np.zeros(grid.size, dtype=np.int64)
    for frame, pose in zip(frames, poses):
        voxels, values = frame_samples(grid, frame, pose)
        sums[voxels] += values
        counts[voxels] += 1
    fused = np.divide(sums, counts, out=np.zeros(grid.size), where=counts > 0)
    logger.debug(f"Fused {len(frames)} frames: {int((counts > 0).sum())} voxels observed")
    return (
        Volume3(grid.reshape(fused), grid.spacing, grid.origin),
        Volume3(grid.reshape(counts.astype(np.float32)), grid.spacing, grid.origin),
    )
