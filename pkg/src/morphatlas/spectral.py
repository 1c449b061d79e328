"""Sobolev metric operators L and K = L^{-1} as spectral multipliers.

L = (-alpha * Lap + gamma * I) ** power, where Lap is the standard
second-order periodic stencil Laplacian.  The per-frequency multiplier is

    ell(k) = (gamma + alpha * sum_j 2 * (1 - cos(2 pi k_j / n_j)) / h_j**2) ** power

which is the exact eigenvalue of the stencil operator, so the power-1 case
is bit-consistent with direct stencil application.  Grid spacing enters only
here; the stencil helpers below (Jacobian matrix, divergence) work in
voxel-index units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .grid import GridShape, ScalarImage, VectorField, central_difference


class MomentumField(VectorField):
    """Dual-space image of a velocity under L; same layout as VectorField."""


NORM_KINDS = ("ll", "lv")


class MetricOperator:
    """Precomputed spectral realization of L and its inverse K.

    Parameters
    ----------
    shape : GridShape
    alpha : smoothness weight (> 0)
    gamma : identity weight (> 0)
    power : integer exponent (>= 1)
    norm_kind : which quadratic form ``sobolev_norm_sq`` uses by default:
        "ll" for <Lv, Lv> (the default) or "lv" for the literature form <Lv, v>.
    """

    def __init__(self, shape: GridShape, alpha: float = 3.0, gamma: float = 1.0,
                 power: int = 3, norm_kind: str = "ll"):
        if alpha <= 0 or gamma <= 0:
            raise ValueError(f"alpha and gamma must be positive, got {alpha}, {gamma}")
        if int(power) != power or power < 1:
            raise ValueError(f"power must be an integer >= 1, got {power}")
        if norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {norm_kind!r}")
        self.shape = shape
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.power = int(power)
        self.norm_kind = norm_kind

        base = np.zeros(shape.dims)
        for j, (n, h) in enumerate(zip(shape.dims, shape.spacing)):
            freq = np.arange(n, dtype=np.float64)
            lam = 2.0 * (1.0 - np.cos(2.0 * np.pi * freq / n)) / h**2
            lam = lam.reshape((1,) * j + (n,) + (1,) * (shape.d - j - 1))
            base = base + self.alpha * lam
        self.multipliers = (self.gamma + base) ** self.power
        # rfft layout is the full table truncated along the last axis
        last = shape.dims[-1] // 2 + 1
        self._rfft_mult = np.ascontiguousarray(self.multipliers[..., :last])

    def __repr__(self):
        return (f"MetricOperator(dims={self.shape.dims}, alpha={self.alpha}, "
                f"gamma={self.gamma}, power={self.power}, norm_kind={self.norm_kind!r})")


def _check_operand(op: MetricOperator, v: VectorField, name: str):
    if v.shape != op.shape:
        raise ShapeMismatchError(f"{name}: field grid {v.shape} != operator grid {op.shape}")


def _spectral_apply(components: np.ndarray, mult: np.ndarray, dims) -> np.ndarray:
    axes = tuple(range(len(dims)))
    out = np.empty_like(components)
    for c in range(components.shape[0]):
        out[c] = np.fft.irfftn(np.fft.rfftn(components[c]) * mult, s=dims, axes=axes)
    return out


def apply_L(op: MetricOperator, v: VectorField) -> MomentumField:
    """Map a velocity into the dual space: per-component rFFT multiply."""
    _check_operand(op, v, "apply_L")
    out = _spectral_apply(v.components, op._rfft_mult, op.shape.dims)
    return MomentumField(v.shape, out)


def apply_K(op: MetricOperator, m: VectorField) -> VectorField:
    """Inverse of L: same pipeline with reciprocal multipliers."""
    _check_operand(op, m, "apply_K")
    out = _spectral_apply(m.components, 1.0 / op._rfft_mult, op.shape.dims)
    return VectorField(m.shape, out)


def jacobian_matrix(v: VectorField) -> np.ndarray:
    """Per-voxel Jacobian (d, d, *dims): entry (i, j) = dv_i/dx_j."""
    d = v.shape.d
    J = np.empty((d, d) + v.shape.dims)
    for i in range(d):
        for j in range(d):
            J[i, j] = central_difference(v.components[i], axis=j)
    return J


def divergence(v: VectorField) -> ScalarImage:
    """Trace of the Jacobian matrix, same stencil."""
    div = np.zeros(v.shape.dims)
    for i in range(v.shape.d):
        div += central_difference(v.components[i], axis=i)
    return ScalarImage(v.shape, div)


def sobolev_norm_sq(op: MetricOperator, v: VectorField, norm_kind: str | None = None) -> float:
    """Squared metric norm of a velocity, normalized by voxel count.

    "ll" evaluates <Lv, Lv>; "lv" evaluates <Lv, v>.  Defaults to the
    operator's configured kind.
    """
    _check_operand(op, v, "sobolev_norm_sq")
    kind = op.norm_kind if norm_kind is None else norm_kind
    if kind not in NORM_KINDS:
        raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {kind!r}")
    Lv = _spectral_apply(v.components, op._rfft_mult, op.shape.dims)
    other = Lv if kind == "ll" else v.components
    return float(np.sum(Lv * other) / op.shape.num_voxels)


@dataclass(frozen=True)
class MetricConfig:
    """Construction parameters for a MetricOperator, grid deferred."""

    alpha: float = 3.0
    gamma: float = 1.0
    power: int = 3
    norm_kind: str = "ll"

    def build(self, shape: GridShape) -> MetricOperator:
        return MetricOperator(shape, self.alpha, self.gamma, self.power, self.norm_kind)
