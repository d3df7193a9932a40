"""Shared fixtures: phantoms, small simulated sequences and run configs."""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.registration.se3 import Pose  # noqa: E402
from src.registration.types import SolverConfig  # noqa: E402
from src.registration.volume import Volume3  # noqa: E402
from src.simulation.simulator import (  # noqa: E402
    FieldOfView,
    SimProtocol,
    extract_frame,
    make_phantom,
    simulate_sequence,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_phantom() -> Volume3:
    return make_phantom((40, 40, 40), "smooth-blobs", seed=3)


@pytest.fixture(scope="session")
def small_fov() -> FieldOfView:
    return FieldOfView((24, 24, 24))


@pytest.fixture(scope="session")
def shifted_pair(blob_phantom, small_fov):
    """Frame 0 at identity and frame 1 seen from a pose shifted 2 voxels along x."""
    truth = [Pose.identity(), Pose.from_xi([2.0, 0, 0, 0, 0, 0])]
    frames = [extract_frame(blob_phantom, pose, small_fov) for pose in truth]
    return frames, truth


@pytest.fixture(scope="session")
def small_sequence(blob_phantom):
    """Three noise-free frames with small motions and perturbed initial poses."""
    protocol = SimProtocol(
        n_frames=3,
        rot_range_deg=3.0,
        trans_range_vox=2.0,
        noise_std=0.0,
        frame_dims=(24, 24, 24),
        seed=5,
    )
    return simulate_sequence(blob_phantom, protocol, source_id="blobs:3")


@pytest.fixture
def solver_config() -> SolverConfig:
    return SolverConfig(pyramid_levels=2, max_iters=15, threads=1)


def smooth_random_volume(rng, dims, sigma=1.5, spacing=(1.0, 1.0, 1.0), origin=None) -> Volume3:
    data = ndimage.gaussian_filter(rng.uniform(0, 255, dims), sigma=sigma, mode="nearest")
    if origin is None:
        origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))
    return Volume3(data, spacing, origin)


@pytest.fixture
def write_config(tmp_path):
    """Write a JSON run config and return its path."""

    def _write(**document) -> Path:
        path = tmp_path / "run.json"
        path.write_text(json.dumps(document), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def small_run_config():
    """Desk-size run config document used by the CLI tests."""
    return {
        "seed": 7,
        "threads": 1,
        "solver": {"pyramid_levels": 2, "max_iters": 15},
        "simulation": {
            "n_frames": 3,
            "rot_range_deg": 3.0,
            "trans_range_vox": 2.0,
            "noise_std": 5.0,
            "frame_dims": [24, 24, 24],
            "phantom_dims": [40, 40, 40],
        },
    }
