"""
Registration core

SE(3) poses, volume sampling, the joint residual system, and the
simultaneous (dsr/dba) and sequential solvers.
"""

from src.registration.se3 import CONVENTION, Pose, PoseSet
from src.registration.solver import solve, solve_dba, solve_dsr
from src.registration.sequential import register_pairwise, run_sequential
from src.registration.types import IterationRecord, SolveReport, SolverConfig
from src.registration.volume import PanoramaGrid, Volume3, compute_panorama_grid, fuse

__all__ = [
    "CONVENTION",
    "Pose",
    "PoseSet",
    "Volume3",
    "PanoramaGrid",
    "compute_panorama_grid",
    "fuse",
    "SolverConfig",
    "IterationRecord",
    "SolveReport",
    "solve",
    "solve_dsr",
    "solve_dba",
    "register_pairwise",
    "run_sequential",
]
