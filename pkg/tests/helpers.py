"""Independent oracle implementations used to pin the library's numerics.

Everything here is deliberately written on a different code path from the
package (explicit python loops, dense matrices, scipy resampling) so that
agreement is meaningful.
"""

import itertools
import math

import numpy as np

from morphatlas import GridShape, MetricConfig, VectorField


def brute_force_interp(values, point):
    """Periodic multilinear interpolation at one point, by hand."""
    d = values.ndim
    lo = [math.floor(point[ax]) for ax in range(d)]
    frac = [point[ax] - lo[ax] for ax in range(d)]
    total = 0.0
    for corner in itertools.product((0, 1), repeat=d):
        weight = 1.0
        idx = []
        for ax in range(d):
            weight *= frac[ax] if corner[ax] else 1.0 - frac[ax]
            idx.append((lo[ax] + corner[ax]) % values.shape[ax])
        total += weight * values[tuple(idx)]
    return total


def brute_force_warp(values, disp):
    """Per-voxel loop: sample values at x + u(x)."""
    out = np.empty_like(values)
    for idx in np.ndindex(values.shape):
        point = [idx[ax] + disp[ax][idx] for ax in range(values.ndim)]
        out[idx] = brute_force_interp(values, point)
    return out


def stencil_jacobian_det(disp):
    """det(I + Du) with an independently written wrapped-index stencil."""
    d = disp.shape[0]
    dims = disp.shape[1:]
    out = np.empty(dims)
    for idx in np.ndindex(dims):
        J = np.eye(d)
        for i in range(d):
            for j in range(d):
                up = list(idx)
                dn = list(idx)
                up[j] = (idx[j] + 1) % dims[j]
                dn[j] = (idx[j] - 1) % dims[j]
                J[i, j] += 0.5 * (disp[i][tuple(up)] - disp[i][tuple(dn)])
        out[idx] = np.linalg.det(J)
    return out


def dense_stencil_L(shape: GridShape, alpha, gamma, power):
    """(-alpha * Lap + gamma * I)^power as a dense matrix over flattened grids."""
    n = shape.num_voxels
    dims = shape.dims
    lap = np.zeros((n, n))
    flat = lambda idx: int(np.ravel_multi_index(idx, dims))
    for idx in np.ndindex(dims):
        row = flat(idx)
        for ax, h in enumerate(shape.spacing):
            for delta in (-1, 1):
                nb = list(idx)
                nb[ax] = (idx[ax] + delta) % dims[ax]
                lap[row, flat(tuple(nb))] += 1.0 / h**2
            lap[row, row] -= 2.0 / h**2
    base = -alpha * lap + gamma * np.eye(n)
    return np.linalg.matrix_power(base, power)


def dense_apply_L(dense_L, field: VectorField):
    dims = field.shape.dims
    out = np.stack(
        [(dense_L @ comp.ravel()).reshape(dims) for comp in field.components]
    )
    return out


def dense_sobolev_norm_sq(dense_L, field: VectorField, norm_kind="ll"):
    Lv = dense_apply_L(dense_L, field)
    other = Lv if norm_kind == "ll" else field.components
    return float(np.sum(Lv * other) / field.shape.num_voxels)


def smooth_field(shape: GridShape, seed: int, max_abs: float) -> VectorField:
    """Low-frequency analytic velocity field with the requested peak size."""
    rng = np.random.default_rng(seed)
    coords = np.indices(shape.dims, dtype=np.float64)
    comps = np.zeros((shape.d,) + shape.dims)
    for c in range(shape.d):
        for _ in range(3):
            k = rng.integers(1, 3, size=shape.d)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            wave = np.zeros(shape.dims)
            for ax in range(shape.d):
                wave = wave + 2 * np.pi * k[ax] * coords[ax] / shape.dims[ax]
            comps[c] += amp * np.sin(wave + phase)
    peak = np.max(np.abs(comps))
    if peak > 0:
        comps *= max_abs / peak
    return VectorField(shape, comps)


def smoothed_noise_field(shape: GridShape, seed: int, max_abs: float,
                         metric: MetricConfig | None = None) -> VectorField:
    """K-smoothed white noise, rescaled; matches the synth generator's recipe."""
    from morphatlas import apply_K

    op = (metric or MetricConfig()).build(shape)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((shape.d,) + shape.dims)
    smooth = apply_K(op, VectorField(shape, noise)).components
    peak = np.max(np.abs(smooth))
    return VectorField(shape, smooth * (max_abs / peak))
