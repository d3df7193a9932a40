"""
CLI Commands for the registration toolkit

Commands: simulate, register, evaluate, fuse, benchmark.

Library errors are turned into console messages and exit codes here and
nowhere else: 0 converged, 2 iteration budget exhausted, 3 config,
4 no overlap, 5 gauge, 6 invalid input, 7 file format, 10 other.
"""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click

from src.config import RunConfig, load_run_config
from src.evaluation.metrics import (
    fov_gain,
    objective_dominance,
    pose_errors,
    summarize,
)
from src.evaluation.reports import (
    write_benchmark_table,
    write_errors_csv,
    write_json,
    write_summary_json,
)
from src.formats.pose_file import read_poses, write_poses
from src.formats.sequence import read_sequence, write_sequence
from src.formats.volume_file import write_volume
from src.registration.se3 import Pose, PoseSet
from src.registration.solver import solve
from src.registration.types import SolveReport
from src.registration.volume import Volume3, compute_panorama_grid, fuse
from src.simulation.simulator import GroundTruthSequence, make_phantom, simulate_sequence
from src.ui.output_manager import console
from src.utils.validation import ConfigError, RegistrationError

logger = logging.getLogger(__name__)

EXIT_CONVERGED = 0
EXIT_MAX_ITERS = 2


def handle_errors(func: Callable) -> Callable:
    """Map RegistrationError subclasses to their exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except RegistrationError as exc:
            console.error(f"{type(exc).__name__}: {exc}")
            logger.debug("Command failed", exc_info=True)
            raise click.exceptions.Exit(exc.exit_code)

    return wrapper


def run_options(func: Callable) -> Callable:
    """--config, --seed and --threads shared by every command."""
    func = click.option(
        "--threads", type=int, default=None, help="Worker threads (1 = bit-reproducible)."
    )(func)
    func = click.option("--seed", type=int, default=None, help="Master seed.")(func)
    func = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="Run config (.toml or .json).",
    )(func)
    return func


def _run_config(config_path: Optional[Path], **overrides: Any) -> RunConfig:
    return load_run_config(config_path).with_overrides(**overrides)


def _path(run: RunConfig, key: str, given: Optional[Path]) -> Path:
    """The command-line path, else ``paths.<key>`` of the run config."""
    if given is not None:
        return given
    configured = getattr(run.paths, key)
    if configured is None:
        raise ConfigError("not given on the command line or in the config", key_path=f"paths.{key}")
    return Path(configured)


def _identity_poses(n: int) -> PoseSet:
    return PoseSet.anchored_at([Pose.identity()] * n, 0)


def _fuse_outputs(out: Path, frames: List[Volume3], poses: PoseSet, margin: int):
    grid = compute_panorama_grid(frames, poses.poses, margin)
    fused, counts = fuse(frames, poses.poses, grid)
    write_volume(out / "fused.json", fused, "f32")
    write_volume(out / "counts.json", counts, "f32")
    return grid, fused, counts


def _register(
    frames: List[Volume3], initial: PoseSet, run: RunConfig, stream: bool
) -> SolveReport:
    config = run.solver_config()
    grid = compute_panorama_grid(frames, initial.poses, config.margin_voxels)
    callback = console.iteration if stream else None
    return solve(frames, initial, grid, config, on_iteration=callback)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool):
    """Direct simultaneous registration of overlapping 3D volumes."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@run_options
@click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), default=None,
    help="Sequence directory to create (default: paths.sequence).",
)
@handle_errors
def simulate(
    config_path: Optional[Path], seed: Optional[int], threads: Optional[int], out: Optional[Path]
):
    """Generate a synthetic sequence with ground-truth poses."""
    run = _run_config(config_path, seed=seed, threads=threads)
    out = _path(run, "sequence", out)
    phantom = run.phantom()
    protocol = run.protocol()
    with console.spinner(f"Simulating {protocol.n_frames} frames"):
        source = make_phantom(
            run.simulation.phantom_dims, run.simulation.phantom_kind, run.seed, run.simulation.spacing
        )
        sequence = simulate_sequence(
            source, protocol, source_id=f"{phantom['kind']}:{run.seed}"
        )
        write_sequence(out, sequence, phantom)
    console.success(f"Wrote {len(sequence.frames)} frames to {out}")


@cli.command()
@click.argument(
    "sequence", required=False, type=click.Path(exists=True, file_okay=False, path_type=Path)
)
@run_options
@click.option("--mode", type=click.Choice(["dsr", "dba", "sequential"]), default=None)
@click.option("--levels", type=int, default=None, help="Pyramid levels.")
@click.option("--max-iters", type=int, default=None, help="Iterations per level.")
@click.option("--poses", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Initial poses (default: init_poses.json in SEQUENCE, else identity).")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: paths.out).")
@click.option("--fuse", "with_fuse", is_flag=True, help="Also write fused and count volumes.")
@click.option("--quiet", "-q", is_flag=True, help="Do not stream iteration lines.")
@handle_errors
@click.pass_context
def register(
    ctx: click.Context,
    sequence: Optional[Path],
    config_path: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
    mode: Optional[str],
    levels: Optional[int],
    max_iters: Optional[int],
    poses: Optional[Path],
    out: Optional[Path],
    with_fuse: bool,
    quiet: bool,
):
    """Register the frames of SEQUENCE."""
    run = _run_config(
        config_path, seed=seed, threads=threads, mode=mode, levels=levels, max_iters=max_iters
    )
    sequence = _path(run, "sequence", sequence)
    out = _path(run, "out", out)
    loaded = read_sequence(sequence, poses)
    initial = loaded.initial or _identity_poses(len(loaded.frames))
    console.header(f"{run.solver.mode.upper()} registration of {len(loaded.frames)} frames")
    report = _register(loaded.frames, initial, run, stream=not quiet)

    write_poses(out / "poses.json", report.poses)
    write_json(out / "report.json", report.to_dict())
    if with_fuse:
        _fuse_outputs(out, loaded.frames, report.poses, run.solver.margin_voxels)

    console.metrics({"status": report.status, "final objective": report.final_objective})
    if report.converged:
        console.success(f"Converged; results in {out}")
        ctx.exit(EXIT_CONVERGED)
    console.warning(f"Finished without convergence ({report.status}); results in {out}")
    ctx.exit(EXIT_MAX_ITERS)


@cli.command()
@click.argument(
    "sequence", required=False, type=click.Path(exists=True, file_okay=False, path_type=Path)
)
@click.option("--poses", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Estimated poses (default: paths.poses).")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Ground truth (default: truth_poses.json in SEQUENCE).")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: paths.out).")
@run_options
@handle_errors
def evaluate(
    sequence: Optional[Path],
    poses: Optional[Path],
    truth: Optional[Path],
    out: Optional[Path],
    config_path: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
):
    """Pose errors, objective and FoV gain of estimated poses."""
    run = _run_config(config_path, seed=seed, threads=threads)
    out = _path(run, "out", out)
    loaded = read_sequence(_path(run, "sequence", sequence))
    estimated = read_poses(_path(run, "poses", poses))
    reference = read_poses(truth) if truth is not None else loaded.truth

    grid = compute_panorama_grid(loaded.frames, estimated.poses, run.solver.margin_voxels)
    _, counts = fuse(loaded.frames, estimated.poses, grid)
    summary = summarize(estimated, reference, loaded.frames, grid, counts)
    summary.update(n_frames=len(loaded.frames), seed=loaded.manifest.seed)
    if reference is not None:
        errors = pose_errors(estimated, reference, grid.spacing)
        write_errors_csv(out / "errors.csv", errors)
        console.metrics(
            {"MAE translation (vox)": errors.mae_translation, "MAE rotation (rad)": errors.mae_rotation}
        )
    else:
        console.info("No ground truth; reporting objective and FoV gain only")
    write_summary_json(out / "summary.json", summary)
    console.metrics({"objective": summary["objective"], "FoV gain": summary["fov_gain"]["ratio"]})
    console.success(f"Evaluation written to {out}")


@cli.command(name="fuse")
@click.argument(
    "sequence", required=False, type=click.Path(exists=True, file_okay=False, path_type=Path)
)
@click.option("--poses", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Estimated poses (default: paths.poses).")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: paths.out).")
@run_options
@handle_errors
def fuse_command(
    sequence: Optional[Path],
    poses: Optional[Path],
    out: Optional[Path],
    config_path: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
):
    """Mean-fuse the frames of SEQUENCE under POSES."""
    run = _run_config(config_path, seed=seed, threads=threads)
    out = _path(run, "out", out)
    loaded = read_sequence(_path(run, "sequence", sequence))
    estimated = read_poses(_path(run, "poses", poses))
    with console.spinner(f"Fusing {len(loaded.frames)} frames"):
        _, _, counts = _fuse_outputs(out, loaded.frames, estimated, run.solver.margin_voxels)
    gain = fov_gain(counts, loaded.frames[0])
    console.metrics({"observed voxels": gain.fused_voxel_count, "FoV gain": gain.ratio})
    console.success(f"Fused volume written to {out}")


def benchmark_row(
    index: int, sequence: GroundTruthSequence, reports: Dict[str, SolveReport]
) -> Dict[str, Any]:
    """Summary row of one simulated sequence across methods."""
    row: Dict[str, Any] = {"sequence": index, "seed": sequence.protocol.seed}
    objectives = {}
    spacing = sequence.frames[0].spacing
    for method, report in reports.items():
        errors = pose_errors(report.poses, sequence.true_poses, spacing)
        objectives[method] = report.final_objective
        row[f"{method}_mae_translation_vox"] = errors.mae_translation
        row[f"{method}_mae_rotation_rad"] = errors.mae_rotation
        row[f"{method}_objective"] = report.final_objective
        row[f"{method}_status"] = report.status
    for method, holds in objective_dominance(objectives).items():
        row[f"dsr_objective_le_{method}"] = holds
    return row


@cli.command()
@run_options
@click.option("--sequences", type=int, default=5, show_default=True)
@click.option("--methods", default="dsr,sequential", show_default=True,
              help="Comma-separated solver modes.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: paths.out).")
@handle_errors
def benchmark(
    config_path: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
    sequences: int,
    methods: str,
    out: Optional[Path],
):
    """Simulate, register and evaluate several seeded sequences."""
    run = _run_config(config_path, seed=seed, threads=threads)
    out = _path(run, "out", out)
    modes = [m.strip() for m in methods.split(",") if m.strip()]
    for mode in modes:
        if mode not in ("dsr", "dba", "sequential"):
            raise click.BadParameter(f"unknown mode {mode!r}", param_hint="--methods")
    rows = []
    for index in range(sequences):
        seeded = run.with_overrides(seed=run.seed + index)
        source = make_phantom(
            seeded.simulation.phantom_dims,
            seeded.simulation.phantom_kind,
            seeded.seed,
            seeded.simulation.spacing,
        )
        with console.spinner(f"Sequence {index + 1}/{sequences}: simulating"):
            sequence = simulate_sequence(source, seeded.protocol())
        reports = {}
        for mode in modes:
            with console.spinner(f"Sequence {index + 1}/{sequences}: {mode}"):
                reports[mode] = _register(
                    sequence.frames,
                    sequence.initial_poses,
                    seeded.with_overrides(mode=mode),
                    stream=False,
                )
        rows.append(benchmark_row(index, sequence, reports))

    write_benchmark_table(out / "benchmark.csv", rows)
    write_json(out / "benchmark.json", {"config": run.model_dump(), "rows": rows})
    headers = ["seq"] + [f"{m} MAE t / r" for m in modes]
    console.table(
        headers,
        [
            [row["sequence"]]
            + [
                f"{row[f'{m}_mae_translation_vox']:.3f} / {row[f'{m}_mae_rotation_rad']:.2e}"
                for m in modes
            ]
            for row in rows
        ],
    )
    console.success(f"Benchmark written to {out}")
