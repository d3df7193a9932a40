"""
Raw volume payload with a JSON header sidecar.

``frame_000.json`` describes the geometry and names the payload
(``frame_000.raw``) and, optionally, a u8 validity mask
(``frame_000.mask.raw``). Payloads are little-endian, x-fastest
(index = x + nx * (y + ny * z)).
"""

import json
import logging
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from src.registration.volume import Volume3
from src.utils.validation import InvalidVolumeError, VolumeFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


class VolumeHeader(BaseModel):
    """JSON sidecar of a raw volume payload."""

    model_config = ConfigDict(extra="forbid")

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    dtype: Literal["u8", "f32"] = "f32"
    byte_order: Literal["little"] = "little"
    payload: str
    mask: Optional[str] = None

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, v):
        if min(v) < 1:
            raise ValueError(f"dims must be positive, got {v}")
        return v

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, v):
        if min(v) <= 0:
            raise ValueError(f"spacing must be positive, got {v}")
        return v

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))


def _write_raw(path: Path, array: np.ndarray, dtype: np.dtype) -> None:
    path.write_bytes(np.asarray(array).astype(dtype).ravel(order="F").tobytes())


def _read_raw(path: Path, dims: Tuple[int, int, int], dtype: np.dtype) -> np.ndarray:
    expected = int(np.prod(dims)) * dtype.itemsize
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise VolumeFormatError(f"cannot read payload: {exc}", path) from exc
    if size != expected:
        raise VolumeFormatError(f"payload is {size} bytes, header implies {expected}", path)
    return np.frombuffer(path.read_bytes(), dtype=dtype).reshape(dims, order="F")


def write_volume(path: PathLike, vol: Volume3, dtype: Literal["u8", "f32"] = "f32") -> Path:
    """Write header ``path`` (.json) plus its payload and mask files.

    u8 payloads store intensities rounded and clipped to [0, 255].
    """
    path = Path(path)
    stem = path.with_suffix("")
    payload = stem.with_suffix(".raw")
    mask_path = Path(f"{stem}.mask.raw") if vol.mask is not None else None
    header = VolumeHeader(
        dims=vol.dims,
        spacing=vol.spacing,
        origin=vol.origin,
        dtype=dtype,
        payload=payload.name,
        mask=mask_path.name if mask_path is not None else None,
    )
    data = vol.data if dtype == "f32" else np.clip(np.rint(vol.data), 0, 255)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_raw(payload, data, DTYPES[dtype])
        if mask_path is not None:
            _write_raw(mask_path, vol.mask, DTYPES["u8"])
        path.write_text(
            json.dumps(header.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise VolumeFormatError(f"cannot write volume: {exc}", path) from exc
    return path


def read_header(path: PathLike) -> VolumeHeader:
    path = Path(path)
    try:
        return VolumeHeader.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise VolumeFormatError(f"cannot read header: {exc}", path) from exc
    except (json.JSONDecodeError, ValidationError) as exc:
        raise VolumeFormatError(f"invalid header: {exc}", path) from exc


def read_volume(path: PathLike) -> Volume3:
    """Header first, then the payload (size-checked) and the optional mask."""
    path = Path(path)
    header = read_header(path)
    data = _read_raw(path.parent / header.payload, header.dims, DTYPES[header.dtype])
    mask = None
    if header.mask is not None:
        mask = _read_raw(path.parent / header.mask, header.dims, DTYPES["u8"]) > 0
    try:
        return Volume3(data, header.spacing, header.origin, mask)
    except InvalidVolumeError as exc:
        raise VolumeFormatError(str(exc), path) from exc
