"""
Gauss-Newton drivers for simultaneous registration.

Two modes share one loop:

- DBA solves the full pose + intensity system through the Schur
  complement (poses first, then the per-voxel intensity step).
- DSR solves the reduced, intensity-free system on the poses only; the
  panoramic intensities never enter the computation.

Both modes accept steps on the same profiled objective (panorama at the
per-voxel mean), so they take the same decisions at every iteration.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse

from src.registration.residuals import (
    BlockSystem,
    ObservationTable,
    assemble,
    build_observations,
    check_counts,
    free_frame_sums,
    objective,
    sharing_frames,
    voxel_means,
)
from src.registration.se3 import Pose, PoseSet
from src.registration.types import IterationRecord, SolveReport, SolverConfig, step_norm
from src.registration.volume import (
    GradientField,
    PanoramaGrid,
    Volume3,
    build_pyramid,
    fuse,
    gradient_field,
)
from src.utils.parallel import map_ordered
from src.utils.validation import (
    ConfigError,
    GaugeUnderdeterminedError,
    InvalidInputError,
    NoOverlapError,
    ensure_same_length,
)

logger = logging.getLogger(__name__)

IterationCallback = Callable[[IterationRecord], None]

SCHUR_CHUNK_ROWS = 4096
ENERGY_FLOOR = 1e-12


# =============================================================================
# Linear algebra
# =============================================================================


def schur_reduce(blocks: BlockSystem, workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Reduced pose system (H_xx - H_xM H_MM^-1 H_xM^T, b_x - H_xM H_MM^-1 b_M).

    H_MM is diagonal, so the downdate is a sum of per-voxel rank-one terms
    (1/n_j) s_j^T s_j, streamed over row chunks of the sparse H_xM^T.

    Raises:
        RegistrationError: if an active voxel has a zero count
    """
    check_counts(blocks.h_mm_diag)
    inv = 1.0 / blocks.h_mm_diag
    s = blocks.h_xm_by_voxel
    n = s.shape[0]
    bounds = [(a, min(a + SCHUR_CHUNK_ROWS, n)) for a in range(0, n, SCHUR_CHUNK_ROWS)]

    def downdate(bound: Tuple[int, int]) -> np.ndarray:
        a, b = bound
        chunk = s[a:b]
        weighted = sparse.diags(inv[a:b]) @ chunk
        return (chunk.T @ weighted).toarray()

    reduced = blocks.h_xx.copy()
    for part in map_ordered(downdate, bounds, workers):
        reduced -= part
    rhs = blocks.b_x - s.T @ (blocks.b_m * inv)
    return 0.5 * (reduced + reduced.T), np.asarray(rhs, dtype=np.float64)


def intensity_update(blocks: BlockSystem, delta: np.ndarray) -> np.ndarray:
    """Intensity step per active voxel: (b_M - H_xM^T delta) / n_j."""
    coupling = blocks.h_xm_by_voxel @ np.asarray(delta, dtype=np.float64)
    return (blocks.b_m - coupling) / blocks.h_mm_diag


def solve_reduced(
    reduced: np.ndarray,
    rhs: np.ndarray,
    damping: float,
    free_frames: Sequence[int] = (),
) -> np.ndarray:
    """Damped Cholesky solve of the reduced pose system.

    On a well-posed system a zero right-hand side yields a zero step.

    Raises:
        GaugeUnderdeterminedError: if a free frame is unconstrained or the
            damped matrix is not positive definite
    """
    rows = reduced.shape[0]
    trace = float(np.trace(reduced))
    if trace <= 0.0:
        raise GaugeUnderdeterminedError("Reduced pose Hessian has no energy")
    for k in range(rows // 6):
        block_trace = float(np.trace(reduced[6 * k : 6 * k + 6, 6 * k : 6 * k + 6]))
        if block_trace <= ENERGY_FLOOR * trace:
            frame = free_frames[k] if k < len(free_frames) else k
            raise GaugeUnderdeterminedError(
                f"Frame {frame} shares no multiply-observed voxel with the others"
            )
    if not np.any(rhs):
        return np.zeros_like(rhs)
    damped = reduced + damping * trace / rows * np.eye(rows)
    try:
        delta = linalg.solve(damped, rhs, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise GaugeUnderdeterminedError(f"Reduced pose Hessian is singular: {exc}") from exc
    if not np.all(np.isfinite(delta)):
        raise GaugeUnderdeterminedError("Reduced pose solve produced non-finite increments")
    return delta


def projection_identity_residual(
    obs: ObservationTable,
    m_values: np.ndarray,
    free_frames: Sequence[int],
    groups: Optional[np.ndarray] = None,
) -> float:
    """Relative ||J_xi^T (A - P A)||_inf with A the panorama at each entry.

    ``groups`` replaces the per-entry voxel grouping P averages over;
    it defaults to the true voxel slots.
    """
    if obs.jac is None:
        raise ValueError("projection_identity_residual needs Jacobian rows")
    a = np.asarray(m_values, dtype=np.float64)[obs.voxel]
    groups = obs.slots if groups is None else np.asarray(groups)
    sums = np.bincount(groups, weights=a)
    sizes = np.bincount(groups)
    projected = sums[groups] / sizes[groups]
    numerator = float(np.abs(free_frame_sums(obs, a - projected, free_frames)).max(initial=0.0))
    denominator = float(np.abs(free_frame_sums(obs, a, free_frames)).max(initial=0.0))
    return numerator / denominator if denominator > 0 else numerator


# =============================================================================
# Driver
# =============================================================================


@dataclass
class _Level:
    """Per-level inputs shared by every iteration."""

    index: int
    frames: List[Volume3]
    gradients: List[GradientField]
    grid: PanoramaGrid


def as_pose_set(initial_poses: Union[PoseSet, Sequence[Pose]], anchor: int) -> PoseSet:
    poses = list(initial_poses.poses if isinstance(initial_poses, PoseSet) else initial_poses)
    if anchor >= len(poses):
        raise ConfigError(f"anchor {anchor} out of range for {len(poses)} frames", key_path="anchor")
    return PoseSet.anchored_at(poses, anchor)


def build_levels(
    frames: Sequence[Volume3], grid: PanoramaGrid, levels: int
) -> List[_Level]:
    """Coarse-to-fine list of per-level frames, gradients and grids."""
    pyramids = [build_pyramid(frame, levels) for frame in frames]
    out = []
    for level in reversed(range(levels)):
        level_frames = [pyramid[level] for pyramid in pyramids]
        out.append(
            _Level(
                index=level,
                frames=level_frames,
                gradients=[gradient_field(f) for f in level_frames],
                grid=grid.coarsened(2**level),
            )
        )
    return out


def _observe(level: _Level, poses: PoseSet, workers: int) -> ObservationTable:
    return build_observations(level.frames, level.gradients, poses.poses, level.grid, workers=workers)


def line_search(
    evaluate: Callable[[float], Optional[Tuple[float, object]]],
    current: float,
    config: SolverConfig,
) -> Optional[Tuple[float, float, object]]:
    """Halve the step until the objective strictly decreases.

    ``evaluate(scale)`` returns (objective, payload) or None when the trial
    pose leaves no overlap. Returns (scale, objective, payload) of the
    accepted step or None when every halving failed.
    """
    if not config.backtracking:
        trial = evaluate(1.0)
        return None if trial is None else (1.0, trial[0], trial[1])
    scale = 1.0
    for _ in range(config.max_halvings + 1):
        trial = evaluate(scale)
        if trial is not None and trial[0] < current:
            return scale, trial[0], trial[1]
        scale *= 0.5
    return None


def converged(previous: float, current: float, norm: float, config: SolverConfig) -> bool:
    """Relative objective decrease or increment norm below tolerance."""
    if norm < config.step_tol or current == 0.0:
        return True
    return (previous - current) / max(abs(previous), np.finfo(float).tiny) < config.rel_tol


def _run_simultaneous(
    frames: Sequence[Volume3],
    initial_poses: Union[PoseSet, Sequence[Pose]],
    grid: PanoramaGrid,
    config: SolverConfig,
    with_intensities: bool,
    on_iteration: Optional[IterationCallback],
) -> SolveReport:
    if len(frames) < 2:
        raise InvalidInputError(f"Simultaneous registration needs >= 2 frames, got {len(frames)}")
    poses = as_pose_set(initial_poses, config.anchor)
    ensure_same_length(frames, poses.poses, "solve frames/poses")
    free = tuple(poses.free_indices)
    workers = config.threads
    evolve_m = with_intensities and not config.refuse_intensities
    skip = config.skip_singletons and not evolve_m
    mode = "dba" if with_intensities else "dsr"
    started = time.perf_counter()
    records: List[IterationRecord] = []
    status = "max-iters"

    def emit(record: IterationRecord) -> None:
        records.append(record)
        logger.debug(
            f"[{mode}] level {record.level} iter {record.iteration}: "
            f"f={record.objective:.6g} |dx|={record.step_norm:.3g} s={record.step_scale:g}"
        )
        if on_iteration is not None:
            on_iteration(record)

    levels = build_levels(frames, grid, config.pyramid_levels)
    for level in levels:
        logger.info(f"[{mode}] level {level.index}: grid {level.grid.dims}")
        obs = _observe(level, poses, workers)
        means = voxel_means(obs)
        m_values = means.copy() if with_intensities else None
        current = objective(obs, means)
        emit(
            IterationRecord(
                level=level.index,
                iteration=0,
                objective=current,
                n_observations=obs.n_entries,
                n_active_voxels=len(obs.active_voxels),
                wall_time=time.perf_counter() - started,
                dba_objective=current if with_intensities else None,
            )
        )
        status = "max-iters"
        for iteration in range(1, config.max_iters + 1):
            sharing = sharing_frames(obs)
            isolated = [k for k in free if not sharing[k]]
            if isolated and len(isolated) == len(free):
                # all singletons, so the reduced rhs is identically zero
                status = "stalled"
                logger.warning(
                    f"[{mode}] level {level.index}: no voxel is shared between frames"
                )
                break
            if isolated:
                raise GaugeUnderdeterminedError(
                    f"Frame {isolated[0]} shares no voxel with the other frames"
                )
            blocks = assemble(obs, m_values, free, skip_singletons=skip, workers=workers)
            reduced, rhs = schur_reduce(blocks, workers)
            delta = solve_reduced(reduced, rhs, config.damping, free)
            identity_residual = projection_identity_residual(
                obs, m_values if with_intensities else means, free
            )

            if not np.any(delta) or step_norm(delta) < config.step_tol:
                accepted = (0.0, current, (obs, means))
            else:

                def evaluate(scale: float):
                    trial_poses = poses.with_increments(delta, scale)
                    try:
                        trial = _observe(level, trial_poses, workers)
                    except NoOverlapError:
                        return None
                    trial_means = voxel_means(trial)
                    return objective(trial, trial_means), (trial, trial_means)

                accepted = line_search(evaluate, current, config)

            if accepted is None:
                status = "stalled"
                logger.warning(
                    f"[{mode}] level {level.index}: no decrease after "
                    f"{config.max_halvings} halvings at iteration {iteration}"
                )
                break

            scale, value, (new_obs, new_means) = accepted
            if scale > 0.0:
                poses = poses.with_increments(delta, scale)
            if with_intensities:
                if evolve_m:
                    step = scale * intensity_update(blocks, delta)
                    entering = (new_obs.counts > 0) & (obs.counts == 0)
                    m_values[blocks.active_voxels] += step
                    m_values[entering] = new_means[entering]
                else:
                    m_values = new_means.copy()

            norm = scale * step_norm(delta)
            previous, current = current, value
            obs, means = new_obs, new_means
            emit(
                IterationRecord(
                    level=level.index,
                    iteration=iteration,
                    objective=current,
                    step_norm=norm,
                    step_scale=scale,
                    projection_identity_residual=identity_residual,
                    n_observations=obs.n_entries,
                    n_active_voxels=len(obs.active_voxels),
                    wall_time=time.perf_counter() - started,
                    dba_objective=objective(obs, m_values) if with_intensities else None,
                )
            )
            if converged(previous, current, norm, config):
                status = "converged"
                break
        logger.info(f"[{mode}] level {level.index} finished: {status}, f={current:.6g}")

    panorama, counts = fuse(frames, poses.poses, grid)
    return SolveReport(
        mode=mode,
        records=records,
        poses=poses,
        panorama=panorama,
        counts=counts,
        converged=status == "converged",
        status=status,
        final_objective=records[-1].objective,
        config=config.to_dict(),
    )


def solve_dsr(
    frames: Sequence[Volume3],
    initial_poses: Union[PoseSet, Sequence[Pose]],
    grid: PanoramaGrid,
    config: SolverConfig,
    on_iteration: Optional[IterationCallback] = None,
) -> SolveReport:
    """Poses-only registration on the reduced system with e = P B - B."""
    return _run_simultaneous(frames, initial_poses, grid, config, False, on_iteration)


def solve_dba(
    frames: Sequence[Volume3],
    initial_poses: Union[PoseSet, Sequence[Pose]],
    grid: PanoramaGrid,
    config: SolverConfig,
    on_iteration: Optional[IterationCallback] = None,
) -> SolveReport:
    """Poses and panoramic intensities through the Schur-complement system."""
    return _run_simultaneous(frames, initial_poses, grid, config, True, on_iteration)


def solve(
    frames: Sequence[Volume3],
    initial_poses: Union[PoseSet, Sequence[Pose]],
    grid: PanoramaGrid,
    config: SolverConfig,
    on_iteration: Optional[IterationCallback] = None,
) -> SolveReport:
    """Dispatch on ``config.mode``."""
    if config.mode == "dsr":
        return solve_dsr(frames, initial_poses, grid, config, on_iteration)
    if config.mode == "dba":
        return solve_dba(frames, initial_poses, grid, config, on_iteration)
    from src.registration.sequential import run_sequential

    return run_sequential(frames, initial_poses, grid, config, on_iteration)
