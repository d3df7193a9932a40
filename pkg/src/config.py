"""
Configuration Module

Process-wide defaults plus the validated run configuration shared by the
CLI commands.

Only ``NO_COLOR`` is read from the environment (a ``.env`` file is loaded
first). Everything else comes from a TOML/JSON run config and CLI flags.

Usage:
    from src.config import Config, load_run_config

    run = load_run_config("run.toml")
    solver = run.solver_config()
    protocol = run.protocol()
"""

import json
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.registration.se3 import CONVENTION
from src.registration.types import SolverConfig
from src.simulation.simulator import SimProtocol
from src.utils.validation import ConfigError

# Load environment variables
load_dotenv()


class Config:
    """Process-wide defaults."""

    DEFAULT_THREADS = os.cpu_count() or 1
    DEFAULT_MARGIN_VOXELS = 2
    CONVENTION = CONVENTION

    @classmethod
    def no_color(cls) -> bool:
        """True when NO_COLOR is set to any non-empty value."""
        return bool(os.getenv("NO_COLOR"))

    @classmethod
    def get_config_dict(cls) -> dict:
        return {
            "default_threads": cls.DEFAULT_THREADS,
            "default_margin_voxels": cls.DEFAULT_MARGIN_VOXELS,
            "convention": cls.CONVENTION,
            "no_color": cls.no_color(),
        }


# =============================================================================
# Run configuration schema
# =============================================================================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SolverSection(_Section):
    mode: Literal["dsr", "dba", "sequential"] = "dsr"
    max_iters: int = Field(50, ge=1)
    pyramid_levels: int = Field(3, ge=1)
    rel_tol: float = Field(1e-6, gt=0)
    step_tol: float = Field(1e-6, gt=0)
    damping: float = Field(1e-6, ge=0)
    backtracking: bool = True
    max_halvings: int = Field(8, ge=0)
    skip_singletons: bool = True
    refuse_intensities: bool = True
    anchor: int = Field(0, ge=0)
    margin_voxels: int = Field(Config.DEFAULT_MARGIN_VOXELS, ge=0)
    sequential_init: Literal["chained", "initial", "identity"] = "chained"


class SimulationSection(_Section):
    n_frames: int = Field(11, ge=2)
    rot_range_deg: float = Field(12.0, ge=0)
    trans_range_vox: float = Field(15.0, ge=0)
    noise_std: float = Field(25.0, ge=0)
    frame_dims: Tuple[int, int, int] = (48, 48, 48)
    frustum_angle_deg: Optional[float] = Field(None, gt=0, lt=180)
    trajectory: Literal["random", "sweep"] = "random"
    init_perturbation_scale: float = Field(0.5, ge=0)
    min_valid_fraction: float = Field(0.5, gt=0, le=1)
    max_retries: int = Field(25, ge=1)
    phantom_kind: Literal["smooth-blobs", "shell", "checker-smoothed"] = "smooth-blobs"
    phantom_dims: Tuple[int, int, int] = (96, 96, 96)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)


class PathsSection(_Section):
    """Fallback locations for commands run without the matching argument.

    ``sequence`` is where ``simulate`` writes and the other commands read;
    ``poses`` is the estimate ``evaluate`` and ``fuse`` use; ``out`` is the
    output directory of ``register``, ``evaluate``, ``fuse`` and ``benchmark``.
    """

    sequence: Optional[str] = None
    poses: Optional[str] = None
    out: Optional[str] = None


class RunConfig(_Section):
    """Validated run configuration (TOML or JSON)."""

    solver: SolverSection = SolverSection()
    simulation: SimulationSection = SimulationSection()
    paths: PathsSection = PathsSection()
    seed: int = 0
    threads: Optional[int] = Field(None, ge=1)

    def resolved_threads(self) -> int:
        return self.threads if self.threads is not None else Config.DEFAULT_THREADS

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver.model_dump(), threads=self.resolved_threads())

    def protocol(self) -> SimProtocol:
        fields = self.simulation.model_dump(exclude={"phantom_kind", "phantom_dims", "spacing"})
        return SimProtocol(**fields, seed=self.seed)

    def phantom(self) -> Dict[str, Any]:
        return {
            "kind": self.simulation.phantom_kind,
            "dims": list(self.simulation.phantom_dims),
            "spacing": list(self.simulation.spacing),
            "seed": self.seed,
        }

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply CLI flags; None values are ignored.

        Recognized keys: mode, max_iters, levels, seed, threads.
        """
        data = self.model_dump()
        solver_keys = {"mode": "mode", "max_iters": "max_iters", "levels": "pyramid_levels"}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in solver_keys:
                data["solver"][solver_keys[key]] = value
            elif key in ("seed", "threads"):
                data[key] = value
            else:
                raise ConfigError(f"unknown override {key!r}", key_path=key)
        return validate_run_config(data)


def _key_path(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return ""
    return ".".join(str(part) for part in errors[0]["loc"])


def validate_run_config(data: Dict[str, Any]) -> RunConfig:
    """Schema-check a plain dict; the first offending key is reported."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], key_path=_key_path(exc)) from exc


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a .toml or .json run config; no path gives the defaults.

    Raises:
        ConfigError: unreadable file, unknown extension or schema violation
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                data = tomllib.load(f)
        elif path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            raise ConfigError(f"unsupported config format {path.suffix!r} (use .toml or .json)")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return validate_run_config(data)


__all__ = [
    "Config",
    "RunConfig",
    "SolverSection",
    "SimulationSection",
    "PathsSection",
    "load_run_config",
    "validate_run_config",
]
