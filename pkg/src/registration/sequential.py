"""
Sequential registration baseline.

Frames are registered one at a time to a running panorama with a
pairwise SSD Gauss-Newton, and each registered frame is fused into the
panorama (running mean) before the next one is processed. Results depend
on frame order.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.registration.residuals import build_observations, profiled_objective
from src.registration.se3 import Pose, PoseSet, apply_increment
from src.registration.solver import as_pose_set, converged, line_search, solve_reduced
from src.registration.types import IterationRecord, SolveReport, SolverConfig, step_norm
from src.registration.volume import (
    PanoramaGrid,
    Volume3,
    build_pyramid,
    frame_samples,
    gradient_field,
)
from src.utils.validation import InvalidInputError, NoOverlapError, ensure_same_length

logger = logging.getLogger(__name__)


@dataclass
class SequentialState:
    """
    Running panorama of the frames registered so far.

    Attributes:
        grid: panorama grid
        mean: flat running mean of the fused intensities
        counts: flat number of fused frames covering each voxel
        registered: accepted pose per fused frame, in fusion order
    """

    grid: PanoramaGrid
    mean: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    registered: List[Pose] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.zeros(self.grid.size)
        self.counts = np.zeros(self.grid.size, dtype=np.int64)

    def fuse_in(self, frame: Volume3, pose: Pose) -> int:
        """Fold ``frame`` into the running mean; returns the voxels it touched."""
        voxels, values = frame_samples(self.grid, frame, pose)
        n = self.counts[voxels]
        self.mean[voxels] = (self.mean[voxels] * n + values) / (n + 1)
        self.counts[voxels] = n + 1
        self.registered.append(pose)
        return len(voxels)

    @property
    def panorama(self) -> Volume3:
        return Volume3(self.grid.reshape(self.mean), self.grid.spacing, self.grid.origin)

    @property
    def count_volume(self) -> Volume3:
        return Volume3(
            self.grid.reshape(self.counts.astype(np.float32)), self.grid.spacing, self.grid.origin
        )


@dataclass
class PairwiseResult:
    """Outcome of one pairwise registration."""

    objective: float
    iterations: int
    status: str
    records: List[IterationRecord] = field(default_factory=list)


def register_pairwise(
    target: Volume3,
    counts: Volume3,
    frame: Volume3,
    init: Pose,
    config: SolverConfig,
    frame_index: Optional[int] = None,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
) -> Tuple[Pose, PairwiseResult]:
    """SSD Gauss-Newton of one frame's pose against a fixed target.

    Only target voxels with count >= 1 carry a residual. The pyramid and
    backtracking settings come from ``config``.

    Raises:
        NoOverlapError: if the frame sees no covered target voxel under ``init``
    """
    started = time.perf_counter()
    covered = Volume3(target.data, target.spacing, target.origin, counts.data >= 1)
    targets = build_pyramid(covered, config.pyramid_levels)
    frames = build_pyramid(frame, config.pyramid_levels)
    pose = init
    records: List[IterationRecord] = []
    status = "max-iters"
    total_iters = 0
    current = float("nan")

    def emit(record: IterationRecord) -> None:
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)

    for level in reversed(range(config.pyramid_levels)):
        level_target, level_frame = targets[level], frames[level]
        grid = PanoramaGrid.like(level_target)
        reference = grid.flatten(level_target.data).astype(np.float64)
        valid = grid.flatten(level_target.mask)
        gradients = [gradient_field(level_frame)]

        def observe(candidate: Pose):
            obs = build_observations(
                [level_frame], gradients, [candidate], grid, voxel_filter=valid
            )
            residual = reference[obs.voxel] - obs.values
            return float(residual @ residual), obs, residual

        current, obs, residual = observe(pose)
        emit(
            IterationRecord(
                level=level,
                iteration=0,
                objective=current,
                n_observations=obs.n_entries,
                n_active_voxels=obs.n_entries,
                wall_time=time.perf_counter() - started,
                frame=frame_index,
            )
        )
        status = "max-iters"
        for iteration in range(1, config.max_iters + 1):
            total_iters += 1
            delta = solve_reduced(obs.jac.T @ obs.jac, -obs.jac.T @ residual, config.damping)

            def evaluate(scale: float):
                candidate = apply_increment(pose, scale * delta)
                try:
                    value, trial, trial_residual = observe(candidate)
                except NoOverlapError:
                    return None
                return value, (candidate, trial, trial_residual)

            if not np.any(delta) or step_norm(delta) < config.step_tol:
                accepted = (0.0, current, (pose, obs, residual))
            else:
                accepted = line_search(evaluate, current, config)
            if accepted is None:
                status = "stalled"
                logger.warning(
                    f"Pairwise frame {frame_index}: level {level} stalled at iteration {iteration}"
                )
                break
            scale, value, (pose, obs, residual) = accepted
            norm = scale * step_norm(delta)
            previous, current = current, value
            emit(
                IterationRecord(
                    level=level,
                    iteration=iteration,
                    objective=current,
                    step_norm=norm,
                    step_scale=scale,
                    n_observations=obs.n_entries,
                    n_active_voxels=obs.n_entries,
                    wall_time=time.perf_counter() - started,
                    frame=frame_index,
                )
            )
            if converged(previous, current, norm, config):
                status = "converged"
                break
    logger.debug(f"Pairwise frame {frame_index}: {status} after {total_iters} iterations")
    return pose, PairwiseResult(current, total_iters, status, records)


def _pairwise_init(
    mode: str, index: int, previous: int, initial: PoseSet, solved: List[Optional[Pose]]
) -> Pose:
    if mode == "identity":
        return Pose.identity()
    if mode == "initial" or solved[previous] is initial[previous]:
        return initial[index]
    # chained: previous solved pose followed by the initial inter-frame motion
    relative = initial[index].compose(initial[previous].inverse())
    return relative.compose(solved[previous])


def run_sequential(
    frames: Sequence[Volume3],
    initial_poses: Union[PoseSet, Sequence[Pose]],
    grid: PanoramaGrid,
    config: SolverConfig,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
) -> SolveReport:
    """Register and fuse frames one by one, anchor first, then in index order."""
    if len(frames) < 2:
        raise InvalidInputError(f"Sequential registration needs >= 2 frames, got {len(frames)}")
    initial = as_pose_set(initial_poses, config.anchor)
    ensure_same_length(frames, initial.poses, "run_sequential frames/poses")
    anchor = config.anchor
    order = [anchor] + [i for i in range(len(frames)) if i != anchor]

    state = SequentialState(grid)
    solved: List[Optional[Pose]] = [None] * len(frames)
    solved[anchor] = initial[anchor]
    state.fuse_in(frames[anchor], initial[anchor])
    records: List[IterationRecord] = []
    statuses = []

    def collect(record: IterationRecord) -> None:
        records.append(record)
        if on_iteration is not None:
            on_iteration(record)

    for previous, index in zip(order[:-1], order[1:]):
        init = _pairwise_init(config.sequential_init, index, previous, initial, solved)
        pose, result = register_pairwise(
            state.panorama,
            state.count_volume,
            frames[index],
            init,
            config,
            frame_index=index,
            on_iteration=collect,
        )
        solved[index] = pose
        statuses.append(result.status)
        touched = state.fuse_in(frames[index], pose)
        logger.info(
            f"Sequential: frame {index} {result.status}, f={result.objective:.6g}, "
            f"fused {touched} voxels"
        )

    poses = PoseSet(tuple(solved), initial.anchored)
    final = profiled_objective(
        build_observations(frames, None, poses.poses, grid, with_jacobian=False)
    )
    status = "converged"
    for candidate in ("max-iters", "stalled"):
        if candidate in statuses:
            status = candidate
    return SolveReport(
        mode="sequential",
        records=records,
        poses=poses,
        panorama=state.panorama,
        counts=state.count_volume,
        converged=status == "converged",
        status=status,
        final_objective=final,
        config=config.to_dict(),
    )
