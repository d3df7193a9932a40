"""
Residual engine: observed (voxel, frame) pairs, residuals and the block
normal equations.

Residuals follow e_ij = M(p_j) - I_i(w(xi_i, p_j)) with
de/dxi_i = -grad I_i(p_ij)^T . dw/dxi_i and de/dM(p_j) = 1. Each row of
J_M holds a single 1, so H_MM is the diagonal of per-voxel observation
counts and never needs to be stored as a matrix; J_xi has one 6-block per
row. Nothing here materializes the dense Jacobian except
:func:`dense_jacobian`, which exists for small oracle checks.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from src.registration.se3 import Pose
from src.registration.volume import (
    GradientField,
    PanoramaGrid,
    Volume3,
    frame_candidates,
    sample_gradient_points,
    sample_points,
    visible_points,
    warp_into_frame,
)
from src.utils.parallel import group_aligned_chunks, map_ordered
from src.utils.validation import NoOverlapError, RegistrationError, ensure_same_length

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """
    Every (panorama voxel j, frame i) pair with sigma(p_ij) = 1.

    Entries are stored as parallel arrays in voxel-major order (j outer,
    i inner).

    Attributes:
        voxel: flat panorama index j per entry
        frame: frame index i per entry
        points: p_ij in frame-i voxel coordinates, (N, 3)
        values: b_ij = I_i(p_ij)
        gradients: interpolated voxel-unit gradients at p_ij, (N, 3) or None
        jac: de_ij/dxi_i rows, (N, 6) or None
        counts: observation count n_j per panorama voxel (grid.size,)
        grid: the panorama grid the indices refer to
        n_frames: number of frames the table was built from
    """

    voxel: np.ndarray
    frame: np.ndarray
    points: np.ndarray
    values: np.ndarray
    gradients: Optional[np.ndarray]
    jac: Optional[np.ndarray]
    counts: np.ndarray
    grid: PanoramaGrid
    n_frames: int

    @property
    def n_entries(self) -> int:
        return int(len(self.voxel))

    @cached_property
    def active_voxels(self) -> np.ndarray:
        return np.flatnonzero(self.counts)

    @cached_property
    def slots(self) -> np.ndarray:
        """Compact active-voxel slot of every entry."""
        return np.searchsorted(self.active_voxels, self.voxel)

    def subset(self, keep: np.ndarray) -> "ObservationTable":
        """Entries where ``keep`` is True, with counts recomputed."""
        voxel = self.voxel[keep]
        return ObservationTable(
            voxel=voxel,
            frame=self.frame[keep],
            points=self.points[keep],
            values=self.values[keep],
            gradients=None if self.gradients is None else self.gradients[keep],
            jac=None if self.jac is None else self.jac[keep],
            counts=np.bincount(voxel, minlength=self.grid.size),
            grid=self.grid,
            n_frames=self.n_frames,
        )


@dataclass(frozen=True, eq=False)
class BlockSystem:
    """
    Blocks of the Gauss-Newton system for the free poses and active voxels.

    Attributes:
        h_xx: J_xi^T J_xi, dense (6F, 6F) for F free frames
        h_xm_by_voxel: sparse (n, 6F); row j is the sum of the jac rows
            observing active voxel j, i.e. H_xM^T
        h_mm_diag: observation counts of the active voxels (diagonal of H_MM)
        b_x: -J_xi^T e
        b_m: -J_M^T e (identically zero in the intensity-free form)
        active_voxels: flat panorama index of each active slot
        residuals: e per entry of the assembled table
        free_frames: frame index of each 6-column block
    """

    h_xx: np.ndarray
    h_xm_by_voxel: sparse.csr_matrix
    h_mm_diag: np.ndarray
    b_x: np.ndarray
    b_m: np.ndarray
    active_voxels: np.ndarray
    residuals: np.ndarray
    free_frames: Tuple[int, ...]

    @property
    def n_pose_params(self) -> int:
        return 6 * len(self.free_frames)


def visibility(frame: Volume3, p: Sequence[float]) -> int:
    """sigma(p_ij): 1 if ``p`` (frame voxel coordinates) is observable in ``frame``."""
    return int(visible_points(frame, np.asarray(p, dtype=np.float64)[None, :])[0])


def pose_jacobian_rows(
    gradients: np.ndarray, spacing: Sequence[float], warped: np.ndarray
) -> np.ndarray:
    """Rows -g^T diag(1/spacing) [I | -skew(w)] for voxel-unit gradients g."""
    scaled = gradients / np.asarray(spacing)
    return np.hstack([-scaled, np.cross(scaled, warped)])


def build_observations(
    frames: Sequence[Volume3],
    gradient_fields: Optional[Sequence[GradientField]],
    poses: Sequence[Pose],
    grid: PanoramaGrid,
    voxel_filter: Optional[np.ndarray] = None,
    with_jacobian: bool = True,
    workers: int = 1,
) -> ObservationTable:
    """Enumerate every observed pair and its intensity (and Jacobian row).

    Args:
        frames: local frames I_i at the current pyramid level
        gradient_fields: precomputed gradients per frame (needed for Jacobians)
        poses: world-to-frame pose per frame
        grid: panorama grid
        voxel_filter: optional boolean mask over panorama voxels to consider
        with_jacobian: skip gradients/Jacobians when only values are needed
        workers: threads used across frames

    Raises:
        NoOverlapError: if no pair is observed at all
    """
    poses = list(poses)
    ensure_same_length(frames, poses, "build_observations frames/poses")
    if with_jacobian:
        if gradient_fields is None:
            raise ValueError("gradient_fields are required when with_jacobian=True")
        ensure_same_length(frames, gradient_fields, "build_observations frames/gradients")
    flat_filter = None
    if voxel_filter is not None:
        flat_filter = np.asarray(voxel_filter, dtype=bool)
        if flat_filter.ndim == 3:
            flat_filter = grid.flatten(flat_filter)

    def observe(i: int):
        frame, pose = frames[i], poses[i]
        voxels = frame_candidates(grid, frame, pose)
        if flat_filter is not None:
            voxels = voxels[flat_filter[voxels]]
        warped, points = warp_into_frame(grid, frame, pose, voxels)
        visible = visible_points(frame, points)
        voxels, warped, points = voxels[visible], warped[visible], points[visible]
        values, _ = sample_points(frame, points)
        gradients = jac = None
        if with_jacobian:
            gradients = sample_gradient_points(gradient_fields[i], points)
            jac = pose_jacobian_rows(gradients, frame.spacing, warped)
        return voxels, points, values, gradients, jac

    parts = map_ordered(observe, list(range(len(frames))), workers)
    voxel = np.concatenate([p[0] for p in parts])
    if voxel.size == 0:
        raise NoOverlapError("No panorama voxel is observed by any frame")
    frame_ids = np.concatenate(
        [np.full(len(p[0]), i, dtype=np.int32) for i, p in enumerate(parts)]
    )
    order = np.lexsort((frame_ids, voxel))

    def stacked(k: int) -> Optional[np.ndarray]:
        if parts[0][k] is None:
            return None
        return np.concatenate([p[k] for p in parts])[order]

    table = ObservationTable(
        voxel=voxel[order],
        frame=frame_ids[order],
        points=stacked(1),
        values=stacked(2),
        gradients=stacked(3),
        jac=stacked(4),
        counts=np.bincount(voxel, minlength=grid.size),
        grid=grid,
        n_frames=len(frames),
    )
    logger.debug(
        f"Observations: {table.n_entries} entries over {len(table.active_voxels)} voxels"
    )
    return table


def voxel_means(obs: ObservationTable) -> np.ndarray:
    """Per-voxel mean of the observed local intensities (0 where unobserved)."""
    sums = np.bincount(obs.voxel, weights=obs.values, minlength=obs.grid.size)
    return np.divide(sums, obs.counts, out=np.zeros(obs.grid.size), where=obs.counts > 0)


def objective(obs: ObservationTable, m_values: np.ndarray) -> float:
    """Sum over entries of (M(p_j) - b_ij)^2; ``m_values`` is indexed by panorama voxel."""
    diff = np.asarray(m_values, dtype=np.float64)[obs.voxel] - obs.values
    return float(diff @ diff)


def sharing_frames(obs: ObservationTable) -> np.ndarray:
    """Per frame, whether it observes at least one voxel another frame also observes."""
    shared = obs.counts[obs.voxel] > 1
    return np.bincount(obs.frame[shared], minlength=obs.n_frames) > 0


def profiled_objective(obs: ObservationTable) -> float:
    """Objective at the optimal intensities for fixed poses (M = per-voxel mean)."""
    return objective(obs, voxel_means(obs))


def _free_columns(n_frames: int, free_frames: Sequence[int]) -> np.ndarray:
    columns = np.full(n_frames, -1, dtype=np.int64)
    columns[list(free_frames)] = np.arange(len(free_frames))
    return columns


def assemble(
    obs: ObservationTable,
    m_values: Optional[np.ndarray] = None,
    free_frames: Optional[Sequence[int]] = None,
    skip_singletons: bool = False,
    workers: int = 1,
) -> BlockSystem:
    """Accumulate the blocks of the normal equations.

    With ``m_values`` the residuals are e = A - B (A = M at each entry's
    voxel). Without it the intensity-free form is used: e = P B - B, where
    P B is the per-voxel mean scattered back to each entry, and b_M = 0.
    The H blocks do not depend on the mode.
    """
    if obs.jac is None:
        raise ValueError("assemble needs an ObservationTable built with Jacobians")
    free_frames = tuple(range(obs.n_frames)) if free_frames is None else tuple(free_frames)
    columns = _free_columns(obs.n_frames, free_frames)
    n_params = 6 * len(free_frames)

    if skip_singletons:
        obs = obs.subset(obs.counts[obs.voxel] > 1)
    active, slot = np.unique(obs.voxel, return_inverse=True)
    counts = np.bincount(slot, minlength=len(active)).astype(np.float64)

    if m_values is None:
        means = np.bincount(slot, weights=obs.values, minlength=len(active)) / counts
        residuals = means[slot] - obs.values
        b_m = np.zeros(len(active))
    else:
        residuals = np.asarray(m_values, dtype=np.float64)[obs.voxel] - obs.values
        b_m = -np.bincount(slot, weights=residuals, minlength=len(active))

    col = columns[obs.frame]

    def accumulate(bounds: Tuple[int, int]):
        a, b = bounds
        h = np.zeros((n_params, n_params))
        g = np.zeros(n_params)
        jac, res, c = obs.jac[a:b], residuals[a:b], col[a:b]
        for k in range(len(free_frames)):
            rows = c == k
            block = jac[rows]
            h[6 * k : 6 * k + 6, 6 * k : 6 * k + 6] += block.T @ block
            g[6 * k : 6 * k + 6] -= block.T @ res[rows]
        return h, g

    h_xx = np.zeros((n_params, n_params))
    b_x = np.zeros(n_params)
    for h, g in map_ordered(accumulate, group_aligned_chunks(obs.voxel, workers), workers):
        h_xx += h
        b_x += g

    free = col >= 0
    rows = np.repeat(slot[free], 6)
    cols = (6 * col[free][:, None] + np.arange(6)).ravel()
    h_xm = sparse.csr_matrix(
        (obs.jac[free].ravel(), (rows, cols)), shape=(len(active), n_params)
    )
    return BlockSystem(
        h_xx=0.5 * (h_xx + h_xx.T),
        h_xm_by_voxel=h_xm,
        h_mm_diag=counts,
        b_x=b_x,
        b_m=b_m,
        active_voxels=active,
        residuals=residuals,
        free_frames=free_frames,
    )


def dense_jacobian(
    obs: ObservationTable, free_frames: Optional[Sequence[int]] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Explicit [J_xi, J_M] for small problems (oracle use only)."""
    if obs.jac is None:
        raise ValueError("dense_jacobian needs an ObservationTable built with Jacobians")
    free_frames = tuple(range(obs.n_frames)) if free_frames is None else tuple(free_frames)
    columns = _free_columns(obs.n_frames, free_frames)
    j_xi = np.zeros((obs.n_entries, 6 * len(free_frames)))
    for row, (k, jac) in enumerate(zip(columns[obs.frame], obs.jac)):
        if k >= 0:
            j_xi[row, 6 * k : 6 * k + 6] = jac
    j_m = np.zeros((obs.n_entries, len(obs.active_voxels)))
    j_m[np.arange(obs.n_entries), obs.slots] = 1.0
    return j_xi, j_m


def check_counts(counts: np.ndarray) -> None:
    if np.any(counts < 1):
        raise RegistrationError("Active voxel with zero observations in H_MM")


def free_frame_sums(obs: ObservationTable, weights: np.ndarray, free_frames: Sequence[int]) -> np.ndarray:
    """J_xi^T w for a per-entry weight vector w."""
    columns = _free_columns(obs.n_frames, free_frames)
    out = np.zeros(6 * len(free_frames))
    col = columns[obs.frame]
    for k in range(len(free_frames)):
        rows = col == k
        out[6 * k : 6 * k + 6] = obs.jac[rows].T @ weights[rows]
    return out


__all__: List[str] = [
    "ObservationTable",
    "BlockSystem",
    "visibility",
    "build_observations",
    "voxel_means",
    "objective",
    "profiled_objective",
    "assemble",
    "dense_jacobian",
    "free_frame_sums",
]
