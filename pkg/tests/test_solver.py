"""Schur reduction, the reduced solve and the simultaneous drivers."""

import numpy as np
import pytest

from src.evaluation.metrics import pose_errors
from src.registration.residuals import ObservationTable, assemble, dense_jacobian, sharing_frames
from src.registration.se3 import Pose
from src.registration.solver import (
    converged,
    intensity_update,
    line_search,
    projection_identity_residual,
    schur_reduce,
    solve,
    solve_dba,
    solve_dsr,
    solve_reduced,
)
from src.registration.types import SolverConfig
from src.registration.volume import PanoramaGrid, compute_panorama_grid
from src.utils.validation import ConfigError, GaugeUnderdeterminedError, InvalidInputError
from tests.conftest import smooth_random_volume


def micro_table(rng, n_voxels=30, n_frames=3, singletons=0):
    """Random observation table: every voxel seen by 2-3 frames, plus optional singletons."""
    voxel, frame = [], []
    for j in range(n_voxels):
        seen = np.sort(rng.choice(n_frames, size=rng.integers(2, n_frames + 1), replace=False))
        voxel += [j] * len(seen)
        frame += list(seen)
    for j in range(n_voxels, n_voxels + singletons):
        voxel.append(j)
        frame.append(int(rng.integers(n_frames)))
    voxel = np.asarray(voxel)
    size = n_voxels + singletons
    return ObservationTable(
        voxel=voxel,
        frame=np.asarray(frame, dtype=np.int32),
        points=np.zeros((len(voxel), 3)),
        values=rng.uniform(0, 255, len(voxel)),
        gradients=None,
        jac=rng.normal(size=(len(voxel), 6)),
        counts=np.bincount(voxel, minlength=size),
        grid=PanoramaGrid((size, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
        n_frames=n_frames,
    )


def dense_elimination(obs, m_values, free):
    """Full normal equations [[Hxx, HxM], [HMx, HMM]] built from the explicit Jacobian."""
    j_xi, j_m = dense_jacobian(obs, free)
    e = m_values[obs.voxel] - obs.values
    h_xx, h_xm, h_mm = j_xi.T @ j_xi, j_xi.T @ j_m, j_m.T @ j_m
    b_x, b_m = -j_xi.T @ e, -j_m.T @ e
    inv = np.linalg.inv(h_mm)
    return h_xx, h_xm, h_mm, b_x, b_m, h_xx - h_xm @ inv @ h_xm.T, b_x - h_xm @ inv @ b_m


def pair_grid(frames, poses):
    return compute_panorama_grid(frames, poses, margin_voxels=2)


def test_intensity_update_averages_observations():
    obs = ObservationTable(
        voxel=np.array([0, 0]),
        frame=np.array([0, 1], dtype=np.int32),
        points=np.zeros((2, 3)),
        values=np.array([10.0, 20.0]),
        gradients=None,
        jac=np.array([[1.0, 0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0, 0]]),
        counts=np.array([2]),
        grid=PanoramaGrid((1, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
        n_frames=2,
    )
    blocks = assemble(obs, m_values=np.array([0.0]), free_frames=(1,))
    assert intensity_update(blocks, np.zeros(6)) == pytest.approx([15.0])
    at_mean = assemble(obs, m_values=np.array([15.0]), free_frames=(1,))
    assert intensity_update(at_mean, np.zeros(6)) == pytest.approx([0.0])


def test_schur_single_observation_is_zero():
    obs = ObservationTable(
        voxel=np.array([0]),
        frame=np.array([0], dtype=np.int32),
        points=np.zeros((1, 3)),
        values=np.array([7.0]),
        gradients=None,
        jac=np.array([[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]]),
        counts=np.array([1]),
        grid=PanoramaGrid((1, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)),
        n_frames=1,
    )
    reduced, rhs = schur_reduce(assemble(obs, m_values=np.array([4.0])))
    assert np.allclose(reduced, 0.0, atol=1e-12)
    assert np.allclose(rhs, 0.0, atol=1e-12)


def test_schur_rhs_vanishes_without_shared_voxels(rng):
    table = micro_table(rng, n_voxels=0, singletons=12)
    _, rhs = schur_reduce(assemble(table, free_frames=(1, 2)))
    assert np.array_equal(rhs, np.zeros(12))


@pytest.mark.parametrize("seed", range(20))
def test_schur_matches_dense_block_elimination(seed):
    rng = np.random.default_rng(seed)
    obs = micro_table(rng)
    free = (1, 2)
    m_values = rng.uniform(0, 255, obs.grid.size)
    blocks = assemble(obs, m_values, free)
    h_xx, h_xm, h_mm, b_x, b_m, reduced_ref, rhs_ref = dense_elimination(obs, m_values, free)
    reduced, rhs = schur_reduce(blocks)
    scale = np.abs(reduced_ref).max()
    assert np.abs(reduced - reduced_ref).max() <= 1e-8 * scale
    assert np.abs(rhs - rhs_ref).max() <= 1e-8 * np.abs(rhs_ref).max()
    assert np.linalg.eigvalsh(reduced).min() >= -1e-9 * scale

    for damping in (1e-3, 1e-7):
        delta = solve_reduced(reduced, rhs, damping, free)
        lam = damping * np.trace(reduced_ref) / 12
        full = np.block([[h_xx + lam * np.eye(12), h_xm], [h_xm.T, h_mm]])
        reference = np.linalg.solve(full, np.concatenate([b_x, b_m]))
        assert np.allclose(delta, reference[:12], rtol=1e-6, atol=1e-8)
        assert np.allclose(intensity_update(blocks, delta), reference[12:], rtol=1e-6, atol=1e-6)


def test_projection_identity_holds_for_per_voxel_panoramas(rng):
    obs = micro_table(rng)
    m_values = rng.uniform(0, 255, obs.grid.size)
    assert projection_identity_residual(obs, m_values, (1, 2)) <= 1e-8
    constant = np.full(obs.grid.size, 5.0)
    assert projection_identity_residual(obs, constant, (1, 2)) == pytest.approx(0.0, abs=1e-12)


def test_projection_identity_detects_wrong_grouping(rng):
    obs = micro_table(rng)
    m_values = rng.uniform(0, 255, obs.grid.size)
    assert projection_identity_residual(obs, m_values, (1, 2), groups=obs.slots // 2) > 1e-3


def test_free_intensity_rhs_equals_intensity_free_rhs(rng):
    obs = micro_table(rng)
    free = (1, 2)
    _, rhs_free_m = schur_reduce(assemble(obs, rng.uniform(0, 255, obs.grid.size), free))
    _, rhs_profiled = schur_reduce(assemble(obs, None, free))
    assert np.allclose(rhs_free_m, rhs_profiled, rtol=1e-9, atol=1e-8)


def test_singletons_do_not_change_the_reduced_system(rng):
    obs = micro_table(rng, singletons=8)
    full = schur_reduce(assemble(obs, None, (1, 2)))
    skipped = schur_reduce(assemble(obs, None, (1, 2), skip_singletons=True))
    assert np.allclose(full[0], skipped[0], atol=1e-9)
    assert np.allclose(full[1], skipped[1], atol=1e-9)


def test_solve_reduced_zero_rhs_gives_zero_step():
    assert np.array_equal(solve_reduced(np.eye(6), np.zeros(6), 1e-6), np.zeros(6))


def test_solve_reduced_checks_the_gauge_before_a_zero_rhs():
    with pytest.raises(GaugeUnderdeterminedError):
        solve_reduced(np.zeros((6, 6)), np.zeros(6), 1e-6)
    starved = np.diag([1.0] * 6 + [0.0] * 6)
    with pytest.raises(GaugeUnderdeterminedError, match="Frame 4"):
        solve_reduced(starved, np.zeros(12), 1e-6, free_frames=(2, 4))


def test_solve_reduced_gauge_errors():
    with pytest.raises(GaugeUnderdeterminedError):
        solve_reduced(np.zeros((6, 6)), np.ones(6), 1e-6)
    starved = np.diag([1.0] * 6 + [0.0] * 6)
    with pytest.raises(GaugeUnderdeterminedError, match="Frame 4"):
        solve_reduced(starved, np.ones(12), 1e-6, free_frames=(2, 4))
    indefinite = np.diag([10.0, -1.0, 1.0, 1.0, 1.0, 1.0])
    with pytest.raises(GaugeUnderdeterminedError):
        solve_reduced(indefinite, np.ones(6), 0.0)


def test_line_search_halves_until_decrease():
    config = SolverConfig()
    values = {1.0: 12.0, 0.5: 11.0, 0.25: 8.0}
    accepted = line_search(lambda s: (values.get(s, 20.0), s), 10.0, config)
    assert accepted == (0.25, 8.0, 0.25)
    assert line_search(lambda s: (20.0, None), 10.0, config) is None
    assert line_search(lambda s: None, 10.0, config) is None
    no_backtracking = SolverConfig(backtracking=False)
    assert line_search(lambda s: (20.0, "x"), 10.0, no_backtracking) == (1.0, 20.0, "x")


def test_convergence_rules():
    config = SolverConfig(rel_tol=1e-3, step_tol=1e-4)
    assert converged(10.0, 9.0, 1e-5, config)
    assert converged(10.0, 0.0, 1.0, config)
    assert converged(10.0, 9.9999, 1.0, config)
    assert not converged(10.0, 9.0, 1.0, config)


def test_dsr_and_dba_take_identical_steps(shifted_pair, solver_config):
    frames, _ = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    grid = pair_grid(frames, initial)
    dsr = solve_dsr(frames, initial, grid, solver_config)
    dba = solve_dba(frames, initial, grid, solver_config)
    assert len(dsr.records) == len(dba.records)
    for a, b in zip(dsr.records, dba.records):
        assert (a.level, a.iteration) == (b.level, b.iteration)
        assert a.objective == pytest.approx(b.objective, rel=1e-8, abs=1e-8)
    for p, q in zip(dsr.poses, dba.poses):
        assert np.allclose(p.xi, q.xi, atol=1e-8)
    assert dsr.status == dba.status


def test_dba_panorama_satisfies_projection_identity(shifted_pair, solver_config):
    frames, _ = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    report = solve_dba(frames, initial, pair_grid(frames, initial), solver_config)
    residuals = [r.projection_identity_residual for r in report.records if r.iteration > 0]
    assert residuals and max(residuals) <= 1e-8
    assert all(r.dba_objective is not None for r in report.records)


def test_identical_frames_converge_at_zero(blob_phantom, small_fov, solver_config):
    from src.simulation.simulator import extract_frame

    frame = extract_frame(blob_phantom, Pose.identity(), small_fov)
    initial = [Pose.identity(), Pose.identity()]
    report = solve_dsr([frame, frame], initial, pair_grid([frame, frame], initial), solver_config)
    assert report.status == "converged"
    assert report.final_objective == 0.0
    assert np.array_equal(report.poses[1].xi, np.zeros(6))


@pytest.mark.parametrize("mode", ["dsr", "dba"])
def test_recovers_a_two_voxel_shift(shifted_pair, solver_config, mode):
    frames, truth = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    solver_config.mode = mode
    report = solve(frames, initial, pair_grid(frames, initial), solver_config)
    assert np.allclose(report.poses[1].xi[:3], truth[1].xi[:3], atol=0.1)
    assert np.allclose(report.poses[1].xi[3:], 0.0, atol=1e-2)
    assert report.final_objective < report.records[0].objective


def test_three_frame_sequence_accuracy(small_sequence, solver_config):
    seq = small_sequence
    grid = pair_grid(seq.frames, seq.initial_poses.poses)
    report = solve_dsr(seq.frames, seq.initial_poses, grid, solver_config)
    errors = pose_errors(report.poses, seq.true_poses)
    assert errors.mae_translation < 0.5
    assert errors.mae_rotation < 1e-2
    before = pose_errors(seq.initial_poses, seq.true_poses)
    assert errors.mae_translation < before.mae_translation


def test_anchor_is_never_moved(small_sequence, solver_config):
    seq = small_sequence
    solver_config.anchor = 1
    grid = pair_grid(seq.frames, seq.initial_poses.poses)
    report = solve_dsr(seq.frames, seq.initial_poses, grid, solver_config)
    assert report.poses.anchored == (False, True, False)
    assert np.array_equal(report.poses[1].xi, seq.initial_poses[1].xi)
    assert np.array_equal(report.poses[1].matrix, seq.initial_poses[1].matrix)


def test_objective_never_increases_within_a_level(small_sequence, solver_config):
    seq = small_sequence
    grid = pair_grid(seq.frames, seq.initial_poses.poses)
    report = solve_dsr(seq.frames, seq.initial_poses, grid, solver_config)
    for level in {r.level for r in report.records}:
        values = report.objectives(level)
        assert all(b <= a for a, b in zip(values, values[1:]))


def test_iteration_callback_sees_every_record(shifted_pair, solver_config):
    frames, _ = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    seen = []
    report = solve_dsr(frames, initial, pair_grid(frames, initial), solver_config, seen.append)
    assert seen == report.records
    assert [r.level for r in seen][0] == solver_config.pyramid_levels - 1


def test_input_errors(shifted_pair):
    frames, _ = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    grid = pair_grid(frames, initial)
    with pytest.raises(ConfigError):
        solve_dsr(frames, initial, grid, SolverConfig(anchor=5, pyramid_levels=1))
    with pytest.raises(InvalidInputError):
        solve_dsr(frames[:1], initial[:1], grid, SolverConfig(pyramid_levels=1))
    with pytest.raises(InvalidInputError):
        solve_dsr(frames, initial + [Pose.identity()], grid, SolverConfig(pyramid_levels=1))


def test_iteration_budget_reports_max_iters(shifted_pair):
    frames, _ = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    config = SolverConfig(max_iters=1, pyramid_levels=1, rel_tol=1e-15, step_tol=1e-15)
    report = solve_dsr(frames, initial, pair_grid(frames, initial), config)
    assert report.status == "max-iters"
    assert not report.converged
    assert len(report.records) == 2


def test_solve_dispatches_to_sequential(shifted_pair, solver_config):
    frames, _ = shifted_pair
    initial = [Pose.identity(), Pose.identity()]
    solver_config.mode = "sequential"
    report = solve(frames, initial, pair_grid(frames, initial), solver_config)
    assert report.mode == "sequential"
    assert all(r.frame == 1 for r in report.records)


def test_truth_is_a_near_fixed_point(small_sequence, solver_config):
    seq = small_sequence
    grid = pair_grid(seq.frames, seq.true_poses.poses)
    report = solve_dsr(seq.frames, seq.true_poses, grid, solver_config)
    errors = pose_errors(report.poses, seq.true_poses)
    assert errors.mae_translation < 0.1
    assert report.final_objective <= report.records[0].objective


def disjoint_frames(rng, offsets):
    """Frames cut from one smooth volume, placed ``offsets`` mm apart along x."""
    frame = smooth_random_volume(rng, (16, 16, 16))
    poses = [Pose.from_xi([-dx, 0, 0, 0, 0, 0]) for dx in offsets]
    return [frame] * len(offsets), poses


@pytest.mark.parametrize("skip_singletons", [True, False])
@pytest.mark.parametrize("method", [solve_dsr, solve_dba])
def test_frames_sharing_no_voxel_stall(rng, method, skip_singletons):
    frames, initial = disjoint_frames(rng, [0.0, 40.0])
    config = SolverConfig(pyramid_levels=1, skip_singletons=skip_singletons, threads=1)
    report = method(frames, initial, pair_grid(frames, initial), config)
    assert report.status == "stalled"
    assert not report.converged
    assert len(report.records) == 1
    assert np.array_equal(report.poses[1].xi, initial[1].xi)


def test_one_isolated_frame_is_a_gauge_error(rng):
    frames, initial = disjoint_frames(rng, [0.0, 4.0, 60.0])
    config = SolverConfig(pyramid_levels=1, threads=1)
    with pytest.raises(GaugeUnderdeterminedError, match="Frame 2"):
        solve_dsr(frames, initial, pair_grid(frames, initial), config)


def test_sharing_frames(rng):
    shared = micro_table(rng, n_voxels=5, n_frames=3)
    assert sharing_frames(shared).any()
    lonely = micro_table(rng, n_voxels=0, n_frames=3, singletons=9)
    assert not sharing_frames(lonely).any()


@pytest.mark.parametrize("refuse_intensities", [True, False])
def test_dba_matches_dsr_with_either_intensity_rule(
    small_sequence, solver_config, refuse_intensities
):
    seq = small_sequence
    grid = pair_grid(seq.frames, seq.initial_poses.poses)
    dsr = solve_dsr(seq.frames, seq.initial_poses, grid, solver_config)
    solver_config.refuse_intensities = refuse_intensities
    dba = solve_dba(seq.frames, seq.initial_poses, grid, solver_config)
    assert len(dsr.records) == len(dba.records)
    for a, b in zip(dsr.records, dba.records):
        assert (a.level, a.iteration) == (b.level, b.iteration)
        assert a.objective == pytest.approx(b.objective, rel=1e-8)
    for p, q in zip(dsr.poses, dba.poses):
        assert np.allclose(p.xi, q.xi, rtol=0.0, atol=1e-8)
    assert dsr.status == dba.status
    residuals = [r.projection_identity_residual for r in dba.records if r.iteration > 0]
    assert max(residuals) <= 1e-8
