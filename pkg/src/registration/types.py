"""
Type definitions for the registration solvers.

Type-safe dataclasses for solver settings and run results, validated on
construction so a bad setting fails before any computation starts.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional

import numpy as np

from src.registration.se3 import CONVENTION, PoseSet
from src.registration.volume import Volume3
from src.utils.validation import ConfigError, ensure_positive

Mode = Literal["dsr", "dba", "sequential"]
SequentialInit = Literal["chained", "initial", "identity"]

MODES = ("dsr", "dba", "sequential")
SEQUENTIAL_INITS = ("chained", "initial", "identity")


@dataclass
class SolverConfig:
    """
    Settings shared by the simultaneous solvers and the sequential baseline.

    Attributes:
        mode: "dsr", "dba" or "sequential"
        max_iters: Gauss-Newton iterations per pyramid level
        pyramid_levels: number of levels, coarse to fine
        rel_tol: stop when the relative objective decrease falls below this
        step_tol: stop when the largest pose increment norm falls below this
        damping: Tikhonov factor; damping * trace / rows is added to the
            reduced pose Hessian diagonal
        backtracking: halve rejected steps
        max_halvings: halvings tried before a level is declared stalled
        skip_singletons: drop voxels observed once from the reduced system
        refuse_intensities: DBA only; reset M to the per-voxel mean every
            iteration instead of letting the intensity update carry it
        anchor: index of the gauge-fixed frame
        margin_voxels: panorama grid padding
        sequential_init: initial guess for each pairwise step
        threads: worker threads for observation building and accumulation

    Usage:
        config = SolverConfig(mode="dba", pyramid_levels=2)
    """

    mode: Mode = "dsr"
    max_iters: int = 50
    pyramid_levels: int = 3
    rel_tol: float = 1e-6
    step_tol: float = 1e-6
    damping: float = 1e-6
    backtracking: bool = True
    max_halvings: int = 8
    skip_singletons: bool = True
    refuse_intensities: bool = True
    anchor: int = 0
    margin_voxels: int = 2
    sequential_init: SequentialInit = "chained"
    threads: int = 1

    def __post_init__(self):
        """Validate the configuration after initialization."""
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}, got {self.mode!r}", key_path="mode")
        if self.sequential_init not in SEQUENTIAL_INITS:
            raise ConfigError(
                f"must be one of {SEQUENTIAL_INITS}, got {self.sequential_init!r}",
                key_path="sequential_init",
            )
        if self.max_iters < 1:
            raise ConfigError(f"must be >= 1, got {self.max_iters}", key_path="max_iters")
        if self.pyramid_levels < 1:
            raise ConfigError(
                f"must be >= 1, got {self.pyramid_levels}", key_path="pyramid_levels"
            )
        ensure_positive(self.rel_tol, "rel_tol")
        ensure_positive(self.step_tol, "step_tol")
        ensure_positive(self.damping, "damping", allow_zero=True)
        ensure_positive(self.max_halvings, "max_halvings", allow_zero=True)
        ensure_positive(self.margin_voxels, "margin_voxels", allow_zero=True)
        if self.anchor < 0:
            raise ConfigError(f"must be >= 0, got {self.anchor}", key_path="anchor")
        if self.threads < 1:
            raise ConfigError(f"must be >= 1, got {self.threads}", key_path="threads")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class IterationRecord:
    """
    One Gauss-Newton iteration (iteration 0 holds the level's start state).

    Attributes:
        level: pyramid level (0 = finest)
        iteration: iteration number within the level
        objective: sum of squared differences with M at the per-voxel mean
        step_norm: largest accepted per-frame increment norm
        step_scale: backtracking scale of the accepted step
        projection_identity_residual: relative ||J_xi^T (A - P A)||_inf
        n_observations: observed (voxel, frame) pairs
        n_active_voxels: panorama voxels observed at least once
        wall_time: seconds since the solve started
        dba_objective: objective with DBA's carried intensities (DBA only)
        frame: frame being registered (sequential baseline only)
    """

    level: int
    iteration: int
    objective: float
    step_norm: float = 0.0
    step_scale: float = 0.0
    projection_identity_residual: float = 0.0
    n_observations: int = 0
    n_active_voxels: int = 0
    wall_time: float = 0.0
    dba_objective: Optional[float] = None
    frame: Optional[int] = None


@dataclass
class SolveReport:
    """
    Result of a registration run.

    Attributes:
        mode: solver mode that produced the report
        records: per-iteration records in execution order
        poses: final pose set
        panorama: final fused panorama on the run's grid
        counts: observation counts of the fused panorama
        converged: True unless the finest level ran out of iterations
        status: "converged", "max-iters" or "stalled"
        final_objective: sum-of-squares objective of the final poses
    """

    mode: str
    records: List[IterationRecord]
    poses: PoseSet
    panorama: Optional[Volume3] = None
    counts: Optional[Volume3] = None
    converged: bool = False
    status: str = "max-iters"
    final_objective: float = float("nan")
    config: Dict[str, Any] = field(default_factory=dict)

    def objectives(self, level: Optional[int] = None) -> List[float]:
        return [r.objective for r in self.records if level is None or r.level == level]

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dictionary (panorama volumes are written separately)."""
        return {
            "mode": self.mode,
            "status": self.status,
            "converged": self.converged,
            "final_objective": self.final_objective,
            "convention": CONVENTION,
            "config": self.config,
            "poses": [
                {"frame_id": i, "xi": [float(v) for v in p.xi], "anchored": a}
                for i, (p, a) in enumerate(zip(self.poses.poses, self.poses.anchored))
            ],
            "records": [asdict(r) for r in self.records],
        }


def step_norm(delta: np.ndarray) -> float:
    """Largest per-frame 6-vector norm of a stacked increment."""
    if delta.size == 0:
        return 0.0
    return float(np.linalg.norm(delta.reshape(-1, 6), axis=1).max())
