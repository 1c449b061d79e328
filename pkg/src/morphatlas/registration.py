"""Registration energies, image similarity, and the greedy oracle optimizer.

The oracle is a conventional first-order registration: at each iteration the
residual image force ``r * grad(warped)`` is smoothed by K and combined with
the metric gradient of the regularizer (which is the velocity itself), then
applied as a descent step.  It never differentiates through the shooting map;
its job is to produce good velocity fields, checked by energy decrease.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergenceError, ShapeMismatchError, ZeroVarianceError
from .flow import IntegrationConfig, geodesic_shoot, svf_exponential
from .grid import (
    DeformationPair,
    ScalarImage,
    VectorField,
    central_difference,
    warp_image,
)
from .spectral import MetricConfig, MetricOperator, apply_K, sobolev_norm_sq


@dataclass(frozen=True)
class RegistrationConfig:
    sigma: float = 0.1
    step_size: float = 0.05
    max_iters: int = 200
    tol: float = 1e-4
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class EnergyBreakdown:
    data: float
    reg: float

    @property
    def total(self) -> float:
        return self.data + self.reg


@dataclass(frozen=True)
class RegistrationResult:
    velocity: VectorField
    energy: EnergyBreakdown
    trace: tuple[float, ...]
    iterations: int
    stop_reason: str


def shoot_velocity(op: MetricOperator, v: VectorField, cfg: IntegrationConfig) -> DeformationPair:
    """Flow a velocity into a deformation pair per the configured parameterization."""
    if cfg.parameterization == "geodesic":
        return geodesic_shoot(op, v, cfg).pair
    return svf_exponential(v, cfg)


def _data_term(warped: np.ndarray, target: np.ndarray, sigma: float) -> float:
    diff = warped - target
    return float(np.mean(diff * diff) / (2.0 * sigma**2))


def registration_energy(
    S: ScalarImage,
    T: ScalarImage,
    v0: VectorField,
    cfg: RegistrationConfig,
    op: MetricOperator | None = None,
    pair: DeformationPair | None = None,
) -> EnergyBreakdown:
    """Match term (1/2 sigma^2) * mean((S o phi^-1 - T)^2) plus half the

    squared metric norm of the velocity.  ``op`` and ``pair`` may be passed
    to reuse a prebuilt operator or an already-integrated deformation.
    """
    if S.shape != T.shape or S.shape != v0.shape:
        raise ShapeMismatchError("registration_energy: inputs live on different grids")
    if op is None:
        op = cfg.metric.build(S.shape)
    if pair is None:
        pair = shoot_velocity(op, v0, cfg.integration)
    warped = warp_image(S, pair.inverse)
    data = _data_term(warped.values, T.values, cfg.sigma)
    reg = 0.5 * sobolev_norm_sq(op, v0)
    return EnergyBreakdown(data=data, reg=reg)


def ncc(A: ScalarImage, B: ScalarImage) -> float:
    """Global normalized cross correlation (Pearson), in [-1, 1]."""
    if A.shape != B.shape:
        raise ShapeMismatchError("ncc: images live on different grids")
    a = A.values - np.mean(A.values)
    b = B.values - np.mean(B.values)
    sa = np.sqrt(np.mean(a * a))
    sb = np.sqrt(np.mean(b * b))
    if sa == 0.0 or sb == 0.0:
        raise ZeroVarianceError("ncc undefined: input image has zero variance")
    r = float(np.mean(a * b) / (sa * sb))
    return min(1.0, max(-1.0, r))


def image_gradient(values: np.ndarray) -> np.ndarray:
    """Central-difference spatial gradient, shape (d, *dims)."""
    return np.stack([central_difference(values, axis=j) for j in range(values.ndim)])


def oracle_register(S: ScalarImage, T: ScalarImage, cfg: RegistrationConfig) -> RegistrationResult:
    """Gradient-descent registration of S onto T; returns the velocity.

    Keeps the best-energy iterate seen, stops on relative energy change below
    ``cfg.tol`` or the iteration budget, and raises NonConvergenceError if the
    energy grows for 10 consecutive iterations.
    """
    if S.shape != T.shape:
        raise ShapeMismatchError("oracle_register: images live on different grids")
    shape = S.shape
    op = cfg.metric.build(shape)
    inv_sigma_sq = 1.0 / cfg.sigma**2

    v = np.zeros((shape.d,) + shape.dims)
    trace: list[float] = []
    best_v = v.copy()
    best_energy: EnergyBreakdown | None = None
    prev_total = None
    rises = 0
    stop_reason = "max_iters"
    iterations = 0

    for it in range(cfg.max_iters):
        field_v = VectorField(shape, v)
        pair = shoot_velocity(op, field_v, cfg.integration)
        warped = warp_image(S, pair.inverse)
        energy = EnergyBreakdown(
            data=_data_term(warped.values, T.values, cfg.sigma),
            reg=0.5 * sobolev_norm_sq(op, field_v),
        )
        trace.append(energy.total)
        iterations = it + 1

        if best_energy is None or energy.total < best_energy.total:
            best_energy = energy
            best_v = v.copy()

        if prev_total is not None:
            # material growth only: flat drift near a fixed point is benign
            if energy.total > prev_total and energy.total > 1.05 * best_energy.total:
                rises += 1
                if rises >= 10:
                    raise NonConvergenceError(
                        f"energy grew for {rises} consecutive iterations "
                        f"(last total {energy.total:g})",
                        trace=trace,
                    )
            else:
                rises = 0
            rel_change = abs(energy.total - prev_total) / max(abs(prev_total), 1e-30)
            if rel_change < cfg.tol:
                stop_reason = "converged"
                break
        prev_total = energy.total

        if cfg.step_size == 0.0:
            stop_reason = "zero_step"
            break

        # data-term descent: the inverse map carries -v, so increasing v along
        # +r * grad(warped) reduces the residual r = warped - T.  The force is
        # preconditioned by the inverse of the configured metric (K twice for
        # the <Lv, Lv> norm, once for <Lv, v>) so the step is a natural
        # gradient of the energy actually being traced.
        residual = warped.values - T.values
        grad_w = image_gradient(warped.values)
        force = VectorField(shape, inv_sigma_sq * residual * grad_w)
        smoothed = apply_K(op, force)
        if op.norm_kind == "ll":
            smoothed = apply_K(op, smoothed)
        update = v - smoothed.components
        v = v - cfg.step_size * update

    return RegistrationResult(
        velocity=VectorField(shape, best_v),
        energy=best_energy,
        trace=tuple(trace),
        iterations=iterations,
        stop_reason=stop_reason,
    )
