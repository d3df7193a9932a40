"""Observation tables, residuals and the block normal equations."""

import numpy as np
import pytest

from src.registration.residuals import (
    ObservationTable,
    assemble,
    build_observations,
    dense_jacobian,
    objective,
    profiled_objective,
    visibility,
    voxel_means,
)
from src.registration.se3 import Pose, apply_increment, warp, warp_points
from src.registration.volume import (
    PanoramaGrid,
    Volume3,
    build_pyramid,
    compute_panorama_grid,
    gradient_field,
    sample_trilinear,
)
from src.utils.validation import NoOverlapError
from tests.conftest import smooth_random_volume


def observe(frames, poses, grid=None, **kwargs):
    if grid is None:
        grid = compute_panorama_grid(frames, poses, margin_voxels=1)
    gradients = [gradient_field(f) for f in frames]
    return build_observations(frames, gradients, poses, grid, **kwargs)


@pytest.fixture
def tiny_pair(rng):
    """Two 8^3 frames of one smooth volume, the second seen one voxel further along x."""
    source = smooth_random_volume(rng, (12, 12, 12))
    poses = [Pose.identity(), Pose.from_xi([1.0, 0, 0, 0.02, -0.01, 0.03])]
    frames = []
    for pose in poses:
        idx = np.indices((8, 8, 8)).reshape(3, -1).T.astype(np.float64)
        local = idx - 3.5
        world = warp_points(pose.inverse(), local)
        values = [sample_trilinear(source, p) for p in source.world_to_voxel(world)]
        frames.append(
            Volume3(np.reshape(values, (8, 8, 8)), origin=(-3.5, -3.5, -3.5))
        )
    return frames, poses


def single_entry_table(value=3.0, jac=(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)):
    return ObservationTable(
        voxel=np.array([0]),
        frame=np.array([0], dtype=np.int32),
        points=np.zeros((1, 3)),
        values=np.array([value]),
        gradients=None,
        jac=np.array([jac], dtype=np.float64),
        counts=np.array([1]),
        grid=PanoramaGrid((1, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
        n_frames=1,
    )


def test_visibility_domain_edges():
    frame = Volume3(np.ones((6, 6, 6)))
    assert visibility(frame, [2.5, 2.5, 2.5]) == 1
    assert visibility(frame, [5.0, 5.0, 5.0]) == 1
    assert visibility(frame, [-0.1, 0.0, 0.0]) == 0
    assert visibility(frame, [0.0, 5.01, 0.0]) == 0


def test_visibility_respects_mask():
    mask = np.ones((6, 6, 6), dtype=bool)
    mask[3, 3, 3] = False
    frame = Volume3(np.ones((6, 6, 6)), mask=mask)
    assert visibility(frame, [3.5, 3.0, 3.0]) == 0
    assert visibility(frame, [1.0, 1.0, 1.0]) == 1


def test_single_frame_sees_every_voxel_once(rng):
    frame = smooth_random_volume(rng, (6, 7, 8))
    grid = PanoramaGrid.like(frame)
    obs = observe([frame], [Pose.identity()], grid)
    assert obs.n_entries == frame.size
    assert np.all(obs.counts == 1)
    assert np.allclose(obs.values, grid.flatten(frame.data))


def test_disjoint_frames_never_share_a_voxel(rng):
    frames = [smooth_random_volume(rng, (8, 8, 8)) for _ in range(2)]
    poses = [Pose.identity(), Pose.from_xi([-20.0, 0, 0, 0, 0, 0])]
    obs = observe(frames, poses)
    assert obs.counts.max() == 1
    assert set(np.unique(obs.frame)) == {0, 1}


def test_no_overlap_raises(rng):
    frame = smooth_random_volume(rng, (6, 6, 6))
    grid = PanoramaGrid((4, 4, 4), (1.0, 1.0, 1.0), (100.0, 100.0, 100.0))
    with pytest.raises(NoOverlapError):
        observe([frame], [Pose.identity()], grid)


def test_entries_are_voxel_major_and_recomputable(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    assert np.all(np.diff(obs.voxel) >= 0)
    same_voxel = np.diff(obs.voxel) == 0
    assert np.all(np.diff(obs.frame)[same_voxel] > 0)
    for k in range(0, obs.n_entries, max(1, obs.n_entries // 25)):
        i = obs.frame[k]
        world = obs.grid.voxel_world(obs.voxel[k : k + 1])[0]
        expected_point = frames[i].world_to_voxel(warp(poses[i], world))
        assert np.allclose(obs.points[k], expected_point)
        assert obs.values[k] == pytest.approx(sample_trilinear(frames[i], obs.points[k]))


def test_voxel_filter_restricts_entries(tiny_pair):
    frames, poses = tiny_pair
    full = observe(frames, poses)
    keep = np.zeros(full.grid.size, dtype=bool)
    keep[full.active_voxels[::2]] = True
    filtered = observe(frames, poses, full.grid, voxel_filter=keep)
    assert set(filtered.voxel) <= set(np.flatnonzero(keep))
    assert filtered.n_entries < full.n_entries


def test_single_observation_blocks():
    obs = single_entry_table()
    j = obs.jac[0]
    blocks = assemble(obs, m_values=np.array([5.0]))
    assert np.allclose(blocks.h_xx, np.outer(j, j))
    assert np.allclose(blocks.b_x, -2.0 * j)
    assert np.allclose(blocks.b_m, [-2.0])
    assert np.array_equal(blocks.h_mm_diag, [1.0])
    assert np.allclose(blocks.h_xm_by_voxel.toarray(), j[None, :])


def test_single_observation_has_zero_intensity_free_residual():
    blocks = assemble(single_entry_table())
    assert np.array_equal(blocks.residuals, [0.0])
    assert np.array_equal(blocks.b_x, np.zeros(6))


def test_objective_hand_sum():
    obs = ObservationTable(
        voxel=np.array([0, 0, 1]),
        frame=np.array([0, 1, 0], dtype=np.int32),
        points=np.zeros((3, 3)),
        values=np.array([1.0, 3.0, 10.0]),
        gradients=None,
        jac=None,
        counts=np.array([2, 1]),
        grid=PanoramaGrid((2, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
        n_frames=2,
    )
    assert objective(obs, np.array([6.0, 10.0])) == pytest.approx(25.0 + 9.0)
    assert np.allclose(voxel_means(obs), [2.0, 10.0])
    assert profiled_objective(obs) == pytest.approx(2.0)


def test_constant_offset_adds_per_entry(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    means = voxel_means(obs)
    shifted = objective(obs, means + 5.0)
    assert shifted == pytest.approx(profiled_objective(obs) + 25.0 * obs.n_entries, rel=1e-9)


def test_blocks_match_dense_jacobian(tiny_pair, rng):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    free = (1,)
    m_values = voxel_means(obs) + rng.normal(scale=3.0, size=obs.grid.size)
    blocks = assemble(obs, m_values, free)
    j_xi, j_m = dense_jacobian(obs, free)
    e = m_values[obs.voxel] - obs.values
    assert np.array_equal(blocks.active_voxels, obs.active_voxels)
    assert np.allclose(blocks.h_xx, j_xi.T @ j_xi, rtol=1e-9, atol=1e-9)
    assert np.allclose(blocks.h_xm_by_voxel.toarray(), j_m.T @ j_xi, atol=1e-9)
    assert np.allclose(blocks.h_mm_diag, np.diag(j_m.T @ j_m))
    assert np.allclose(blocks.b_x, -j_xi.T @ e, rtol=1e-9, atol=1e-9)
    assert np.allclose(blocks.b_m, -j_m.T @ e, atol=1e-9)


def test_assembly_matches_naive_loop(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    blocks = assemble(obs)
    means = voxel_means(obs)
    h = np.zeros((12, 12))
    g = np.zeros(12)
    for k in range(obs.n_entries):
        i = obs.frame[k]
        row = obs.jac[k]
        e = means[obs.voxel[k]] - obs.values[k]
        h[6 * i : 6 * i + 6, 6 * i : 6 * i + 6] += np.outer(row, row)
        g[6 * i : 6 * i + 6] -= row * e
    assert np.allclose(blocks.h_xx, h, rtol=1e-9, atol=1e-9)
    assert np.allclose(blocks.b_x, g, rtol=1e-9, atol=1e-9)


def test_intensity_gradient_vanishes_at_the_means(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    at_means = assemble(obs, voxel_means(obs))
    intensity_free = assemble(obs)
    assert np.allclose(at_means.b_m, 0.0, atol=1e-9)
    assert np.allclose(at_means.residuals, intensity_free.residuals, atol=1e-12)
    assert np.allclose(at_means.b_x, intensity_free.b_x, atol=1e-9)


def test_intensity_hessian_is_the_count_histogram(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    blocks = assemble(obs)
    assert np.array_equal(blocks.h_mm_diag, obs.counts[obs.active_voxels])
    assert blocks.h_mm_diag.sum() == obs.n_entries


def test_skip_singletons_drops_single_observations(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    blocks = assemble(obs, skip_singletons=True)
    assert np.all(blocks.h_mm_diag > 1)
    assert np.all(obs.counts[blocks.active_voxels] > 1)


def test_parallel_assembly_matches_serial(tiny_pair):
    frames, poses = tiny_pair
    obs = observe(frames, poses)
    serial = assemble(obs, workers=1)
    threaded = assemble(obs, workers=4)
    assert np.allclose(serial.h_xx, threaded.h_xx, rtol=1e-12, atol=1e-9)
    assert np.allclose(serial.b_x, threaded.b_x, rtol=1e-12, atol=1e-9)


def residual_at(frame, pose, world_point):
    """-I(w(xi, p)) for one panorama point (the M term does not depend on the pose)."""
    return -sample_trilinear(frame, frame.world_to_voxel(warp(pose, world_point)))


def test_jacobian_rows_exact_on_affine_field():
    dims = (10, 10, 10)
    spacing = (1.0, 0.5, 2.0)
    x, y, z = np.indices(dims, dtype=np.float64)
    origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))
    frame = Volume3(2 * x - y + 3 * z + 100, spacing, origin)
    pose = Pose.from_xi([0.3, -0.2, 0.1, 0.02, -0.01, 0.03])
    obs = observe([frame], [pose], PanoramaGrid.like(frame))
    interior = np.all((obs.points >= 1.0) & (obs.points <= np.array(dims) - 2.0), axis=1)
    rows = np.flatnonzero(interior)[:20]
    assert len(rows) == 20
    h = 1e-5
    for k in rows:
        world = obs.grid.voxel_world(obs.voxel[k : k + 1])[0]
        fd = np.zeros(6)
        for c in range(6):
            step = np.zeros(6)
            step[c] = h
            plus = residual_at(frame, apply_increment(pose, step), world)
            minus = residual_at(frame, apply_increment(pose, -step), world)
            fd[c] = (plus - minus) / (2 * h)
        assert np.allclose(obs.jac[k], fd, atol=1e-6)


def test_jacobian_rows_track_finite_differences_on_smooth_data(blob_phantom, small_fov):
    from src.simulation.simulator import extract_frame

    pose = Pose.from_xi([0.5, -0.3, 0.2, 0.03, 0.02, -0.02])
    frame = extract_frame(blob_phantom, Pose.identity(), small_fov)
    obs = observe([frame], [pose], PanoramaGrid.like(frame))
    interior = np.all((obs.points >= 1.0) & (obs.points <= np.array(frame.dims) - 2.0), axis=1)
    norms = np.linalg.norm(obs.jac, axis=1)
    strong = np.flatnonzero(interior & (norms > np.median(norms[interior])))[::40][:60]
    h = 0.25
    errors = []
    for k in strong:
        world = obs.grid.voxel_world(obs.voxel[k : k + 1])[0]
        fd = np.zeros(6)
        for c in range(6):
            step = np.zeros(6)
            step[c] = h if c < 3 else h / 10.0
            plus = residual_at(frame, apply_increment(pose, step), world)
            minus = residual_at(frame, apply_increment(pose, -step), world)
            fd[c] = (plus - minus) / (2 * step[c])
        errors.append(np.linalg.norm(obs.jac[k] - fd) / np.linalg.norm(obs.jac[k]))
    assert np.median(errors) < 0.15


def test_jacobian_rows_match_the_sampled_gradient_model(blob_phantom, small_fov, rng):
    from src.simulation.simulator import extract_frame

    # level 1 of the pyramid: blurred, spacing 2
    level = build_pyramid(extract_frame(blob_phantom, Pose.identity(), small_fov), 2)[1]
    pose = Pose.from_xi([0.7, -0.4, 0.3, 0.04, -0.03, 0.05])
    obs = observe([level], [pose], PanoramaGrid.like(level))
    norms = np.linalg.norm(obs.jac, axis=1)
    candidates = np.flatnonzero(norms > 1e-3 * norms.max())
    rows = rng.choice(candidates, size=200, replace=False)
    h = 1e-4
    worst = 0.0
    for k in rows:
        world = obs.grid.voxel_world(obs.voxel[k : k + 1])[0]
        g = obs.gradients[k]
        fd = np.zeros(6)
        for c in range(6):
            step = np.zeros(6)
            step[c] = h
            plus = level.world_to_voxel(warp(apply_increment(pose, step), world))
            minus = level.world_to_voxel(warp(apply_increment(pose, -step), world))
            fd[c] = -g @ (plus - minus) / (2 * h)
        worst = max(worst, np.linalg.norm(obs.jac[k] - fd) / np.linalg.norm(obs.jac[k]))
    assert worst < 1e-3
