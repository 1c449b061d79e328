"""Bit-exact raw float32 payloads and their JSON metadata.

Payloads are little-endian 32-bit floats, last axis fastest (C order).
Vector fields store their d component volumes concatenated.  This is both
the generic ``.rawf32`` volume format and the provider wire format.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError
from .grid import GridShape, ScalarImage, VectorField


def quantize_f32(arr: np.ndarray) -> np.ndarray:
    """Round to wire precision: the float64 image of the float32 values."""
    return arr.astype("<f4").astype(np.float64)


def write_raw_f32(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raw_f32(path, shape: tuple[int, ...]) -> np.ndarray:
    data = Path(path).read_bytes()
    count = int(np.prod(shape))
    if len(data) != 4 * count:
        raise VolumeFormatError(
            f"{path}: payload is {len(data)} bytes, expected {4 * count} "
            f"for shape {shape}"
        )
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)


def grid_meta(shape: GridShape, **extra) -> dict:
    meta = {"dims": list(shape.dims), "spacing": list(shape.spacing)}
    meta.update(extra)
    return meta


def write_meta(path, meta: dict) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: malformed JSON metadata ({exc})") from exc


def meta_grid_shape(meta: dict, source: str) -> GridShape:
    if "dims" not in meta:
        raise VolumeFormatError(f"{source}: metadata missing 'dims'")
    return GridShape(tuple(meta["dims"]), tuple(meta.get("spacing", ())))


def read_scalar_f32(path, shape: GridShape) -> ScalarImage:
    return ScalarImage(shape, read_raw_f32(path, shape.dims))


def read_vector_f32(path, shape: GridShape) -> VectorField:
    return VectorField(shape, read_raw_f32(path, (shape.d,) + shape.dims))
