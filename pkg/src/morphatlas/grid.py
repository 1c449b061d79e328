"""Dense periodic-grid containers: images, vector fields, deformation maps.

Conventions used throughout the package:

* Arrays are float64 and C-ordered; the documented linearization is
  "last axis fastest", which is exactly numpy's C order.
* Coordinates are continuous voxel indices.  Axis ``i`` of an ``n_i``-point
  grid is periodic with period ``n_i`` (torus domain), so coordinate ``-0.5``
  samples the same location as ``n_i - 0.5``.
* Deformation maps are stored as displacement fields ``u`` with
  ``phi(x) = x + u(x)``, in voxel units.
* Grid ``spacing`` is metadata that reweights the smoothing metric (see
  :mod:`morphatlas.spectral`); resampling and finite-difference stencils in
  this module operate in voxel-index units.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class GridShape:
    """Per-axis point counts and physical spacing of a periodic grid."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {len(dims)} axes")
        if any(n < 4 for n in dims):
            raise ValueError(f"every axis needs at least 4 points, got {dims}")
        spacing = tuple(float(s) for s in self.spacing) or (1.0,) * len(dims)
        object.__setattr__(self, "spacing", spacing)
        if len(spacing) != len(dims):
            raise ValueError("spacing must have one entry per axis")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacings must be positive, got {spacing}")

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))


def _as_grid_array(arr, expected_shape, what: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.shape != expected_shape:
        raise ShapeMismatchError(
            f"{what}: expected array of shape {expected_shape}, got {out.shape}"
        )
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{what}: values must be finite")
    return out


@dataclass(frozen=True, eq=False)
class ScalarImage:
    """One real value per grid point."""

    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _as_grid_array(self.values, self.shape.dims, "ScalarImage")
        )

    @classmethod
    def zeros(cls, shape: GridShape) -> "ScalarImage":
        return cls(shape, np.zeros(shape.dims))

    @classmethod
    def from_array(cls, arr, spacing=()) -> "ScalarImage":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(GridShape(arr.shape, spacing), arr)


@dataclass(frozen=True, eq=False)
class VectorField:
    """d vector components per grid point (displacement/velocity, voxel units).

    ``components`` has shape ``(d, *dims)``: component ``c`` is a full scalar
    grid, matching the on-disk layout of d concatenated scalar volumes.
    """

    shape: GridShape
    components: np.ndarray

    def __post_init__(self):
        expected = (self.shape.d,) + self.shape.dims
        object.__setattr__(
            self,
            "components",
            _as_grid_array(self.components, expected, type(self).__name__),
        )

    @classmethod
    def zeros(cls, shape: GridShape) -> "VectorField":
        return cls(shape, np.zeros((shape.d,) + shape.dims))

    @classmethod
    def from_array(cls, arr, spacing=()) -> "VectorField":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(GridShape(arr.shape[1:], spacing), arr)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.components)))


@dataclass(frozen=True, eq=False)
class DeformationPair:
    """Forward map phi and inverse map phi^{-1} plus cached |Dphi|.

    Both maps are displacement fields on one shared grid; the forward
    Jacobian determinant must be positive everywhere (diffeomorphism check).
    """

    forward: VectorField
    inverse: VectorField
    jac_det_forward: ScalarImage

    def __post_init__(self):
        shape = self.forward.shape
        if self.inverse.shape != shape or self.jac_det_forward.shape != shape:
            raise ShapeMismatchError("DeformationPair parts live on different grids")
        min_det = float(np.min(self.jac_det_forward.values))
        if min_det <= 0.0:
            raise ValueError(
                f"DeformationPair requires positive Jacobian determinant, min={min_det:g}"
            )

    @property
    def shape(self) -> GridShape:
        return self.forward.shape

    @classmethod
    def identity(cls, shape: GridShape) -> "DeformationPair":
        ones = ScalarImage(shape, np.ones(shape.dims))
        return cls(VectorField.zeros(shape), VectorField.zeros(shape), ones)


def identity_coords(shape: GridShape) -> np.ndarray:
    """Voxel-index coordinates of every grid point, shape ``(d, *dims)``."""
    return np.indices(shape.dims, dtype=np.float64)


def sample_periodic(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``values`` at continuous voxel coordinates.

    ``coords`` has shape ``(d, ...)``; the result has shape ``coords.shape[1:]``.
    Every axis wraps periodically, and sampling exactly at integer coordinates
    reproduces the stored values.
    """
    d = values.ndim
    if coords.ndim < 1 or coords.shape[0] != d:
        raise ShapeMismatchError(
            f"query must have shape ({d}, ...), got {coords.shape}"
        )
    floors = np.floor(coords)
    fracs = coords - floors
    base = floors.astype(np.int64)
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=d):
        weight = np.ones(coords.shape[1:], dtype=np.float64)
        index = []
        for axis, bit in enumerate(corner):
            weight = weight * (fracs[axis] if bit else 1.0 - fracs[axis])
            index.append((base[axis] + bit) % values.shape[axis])
        out += weight * values[tuple(index)]
    return out


def interpolate(img: ScalarImage, query: np.ndarray) -> np.ndarray:
    """Sample an image at continuous grid coordinates, one per output point.

    ``query`` is an array of shape ``(d, ...)`` of finite voxel coordinates;
    the samples come back with shape ``query.shape[1:]``.
    """
    query = np.asarray(query, dtype=np.float64)
    if not np.all(np.isfinite(query)):
        raise ValueError("query coordinates must be finite")
    return sample_periodic(img.values, query)


def _require_same_grid(a, b, op: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: grids differ ({a.shape} vs {b.shape})")


def warp_image(img: ScalarImage, map_disp: VectorField) -> ScalarImage:
    """``img`` composed with ``phi``: output(x) = img(x + u(x))."""
    _require_same_grid(img, map_disp, "warp_image")
    coords = identity_coords(img.shape) + map_disp.components
    return ScalarImage(img.shape, sample_periodic(img.values, coords))


def warp_field(field: VectorField, map_disp: VectorField) -> VectorField:
    """Component-wise resampling of a vector field at x + u(x)."""
    _require_same_grid(field, map_disp, "warp_field")
    coords = identity_coords(field.shape) + map_disp.components
    warped = np.stack([sample_periodic(c, coords) for c in field.components])
    return VectorField(field.shape, warped)


def compose_maps(outer_disp: VectorField, inner_disp: VectorField) -> VectorField:
    """Displacement of phi_outer(phi_inner(x)).

    Returns w with x + w(x) = phi_outer(phi_inner(x)), i.e.
    w = u_inner + u_outer(x + u_inner(x)) with periodic resampling.
    """
    _require_same_grid(outer_disp, inner_disp, "compose_maps")
    coords = identity_coords(inner_disp.shape) + inner_disp.components
    sampled = np.stack(
        [sample_periodic(c, coords) for c in outer_disp.components]
    )
    return VectorField(inner_disp.shape, inner_disp.components + sampled)


def central_difference(values: np.ndarray, axis: int) -> np.ndarray:
    """Second-order central difference with periodic wrap, unit step."""
    return 0.5 * (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis))


def displacement_jacobian(components: np.ndarray) -> np.ndarray:
    """Du for a displacement array ``(d, *dims)``; result ``(d, d, *dims)``."""
    d = components.shape[0]
    J = np.empty((d, d) + components.shape[1:])
    for i in range(d):
        for j in range(d):
            J[i, j] = central_difference(components[i], axis=j)
    return J


def _det_identity_plus(J: np.ndarray) -> np.ndarray:
    """det(I + J) per voxel for J of shape (d, d, *dims), d in {2, 3}."""
    d = J.shape[0]
    if d == 2:
        a = 1.0 + J[0, 0]
        b = J[0, 1]
        c = J[1, 0]
        e = 1.0 + J[1, 1]
        return a * e - b * c
    a = 1.0 + J[0, 0]
    b = J[0, 1]
    c = J[0, 2]
    p = J[1, 0]
    q = 1.0 + J[1, 1]
    r = J[1, 2]
    s = J[2, 0]
    t = J[2, 1]
    u = 1.0 + J[2, 2]
    return a * (q * u - r * t) - b * (p * u - r * s) + c * (p * t - q * s)


def jacobian_determinant(map_disp: VectorField) -> ScalarImage:
    """Per-voxel det(I + Du) of a displacement field.

    Du uses second-order central differences with periodic wrap in
    voxel-index units, so any constant displacement gives exactly 1.0.
    """
    det = _det_identity_plus(displacement_jacobian(map_disp.components))
    return ScalarImage(map_disp.shape, det)
