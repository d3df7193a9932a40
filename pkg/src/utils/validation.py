"""
Input Validation and Error Types

This module defines the exception hierarchy shared by the registration
library and the CLI, plus the small argument validators used by the
dataclasses' ``__post_init__`` hooks.

Every exception carries the process exit code the CLI reports for it, so
callers only need to catch ``RegistrationError``.
"""

import logging
from typing import Any, Iterable, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class RegistrationError(Exception):
    """Base class for every error raised by the registration package."""

    exit_code = 10


class ConfigError(RegistrationError, ValueError):
    """Invalid configuration (schema violation, bad solver or protocol setting)."""

    exit_code = 3

    def __init__(self, message: str, key_path: str = ""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class NoOverlapError(RegistrationError):
    """No (voxel, frame) pair is observed, so there is nothing to align."""

    exit_code = 4


class GaugeUnderdeterminedError(RegistrationError):
    """The reduced pose Hessian is singular even after damping."""

    exit_code = 5


class InvalidInputError(RegistrationError, ValueError):
    """Inputs are structurally wrong (length mismatch, bad pose file, ...)."""

    exit_code = 6


class InvalidVolumeError(InvalidInputError):
    """A volume violates the Volume3 invariants."""


class VolumeFormatError(RegistrationError):
    """On-disk data could not be read or written."""

    exit_code = 7

    def __init__(self, message: str, path: Any = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path is not None else message)


def ensure_triple(values: Iterable[float], name: str, positive: bool = False) -> Tuple[float, ...]:
    """Coerce ``values`` to a 3-tuple of finite floats.

    Args:
        values: Sequence of three numbers
        name: Field name used in error messages
        positive: Require every component to be strictly positive

    Returns:
        Tuple of three Python floats

    Raises:
        InvalidInputError: If the length, finiteness or sign check fails
    """
    triple = tuple(float(v) for v in values)
    if len(triple) != 3:
        raise InvalidInputError(f"{name} must have 3 components, got {len(triple)}")
    if not all(np.isfinite(triple)):
        raise InvalidInputError(f"{name} must be finite, got {triple}")
    if positive and min(triple) <= 0:
        raise InvalidInputError(f"{name} must be strictly positive, got {triple}")
    return triple


def ensure_dims(values: Iterable[int], name: str = "dims", minimum: int = 1) -> Tuple[int, int, int]:
    """Coerce ``values`` to three integers, each at least ``minimum``."""
    dims = tuple(int(v) for v in values)
    if len(dims) != 3:
        raise InvalidInputError(f"{name} must have 3 components, got {len(dims)}")
    if min(dims) < minimum:
        raise InvalidInputError(f"{name} must be >= {minimum} per axis, got {dims}")
    return dims  # type: ignore[return-value]


def ensure_same_length(first: Sequence[Any], second: Sequence[Any], what: str) -> None:
    """Raise InvalidInputError unless both sequences have the same length."""
    if len(first) != len(second):
        raise InvalidInputError(
            f"{what}: length mismatch ({len(first)} vs {len(second)})"
        )


def ensure_positive(value: float, name: str, allow_zero: bool = False) -> None:
    """Raise ConfigError when ``value`` is negative (or zero unless allowed)."""
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ConfigError(f"must be {bound}, got {value}", key_path=name)
