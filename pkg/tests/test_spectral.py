"""Metric operators L/K, stencil derivatives, and the velocity norm."""

import numpy as np
import pytest

from morphatlas import (
    GridShape,
    MetricConfig,
    MetricOperator,
    ShapeMismatchError,
    VectorField,
    apply_K,
    apply_L,
    divergence,
    jacobian_matrix,
    sobolev_norm_sq,
)

from helpers import dense_apply_L, dense_sobolev_norm_sq, dense_stencil_L, smooth_field


def analytic_multiplier(shape, k, alpha, gamma, power):
    total = 0.0
    for kj, nj, hj in zip(k, shape.dims, shape.spacing):
        total += 2.0 * (1.0 - np.cos(2.0 * np.pi * kj / nj)) / hj**2
    return (gamma + alpha * total) ** power


def single_mode(shape, k, amplitude=1.0, component=0):
    coords = np.indices(shape.dims, dtype=np.float64)
    phase = np.zeros(shape.dims)
    for ax in range(shape.d):
        phase = phase + 2.0 * np.pi * k[ax] * coords[ax] / shape.dims[ax]
    comps = np.zeros((shape.d,) + shape.dims)
    comps[component] = amplitude * np.cos(phase)
    return VectorField(shape, comps)


class TestMetricOperator:
    def test_multiplier_table_positive_definite(self):
        op = MetricOperator(GridShape((8, 10)), alpha=3.0, gamma=1.0, power=3)
        assert op.multipliers.shape == (8, 10)
        assert np.all(op.multipliers >= 1.0)  # gamma^power
        assert op.multipliers[tuple([0] * 2)] == pytest.approx(1.0)

    def test_zero_frequency_is_gamma_power(self):
        op = MetricOperator(GridShape((8, 8)), alpha=2.0, gamma=1.5, power=2)
        assert op.multipliers[0, 0] == pytest.approx(1.5**2)
        assert np.min(op.multipliers) == pytest.approx(1.5**2)

    def test_rejects_bad_parameters(self):
        shape = GridShape((8, 8))
        with pytest.raises(ValueError):
            MetricOperator(shape, alpha=0.0)
        with pytest.raises(ValueError):
            MetricOperator(shape, gamma=-1.0)
        with pytest.raises(ValueError):
            MetricOperator(shape, power=0)
        with pytest.raises(ValueError):
            MetricOperator(shape, norm_kind="bad")


class TestApplyL:
    def test_zero_maps_to_zero(self):
        shape = GridShape((8, 8))
        op = MetricOperator(shape)
        out = apply_L(op, VectorField.zeros(shape))
        assert np.max(np.abs(out.components)) == 0.0

    @pytest.mark.parametrize("k,power", [((1, 0), 1), ((2, 3), 3), ((0, 1), 2)])
    def test_single_mode_eigenvalue(self, k, power):
        shape = GridShape((16, 16))
        op = MetricOperator(shape, alpha=3.0, gamma=1.0, power=power)
        v = single_mode(shape, k, amplitude=0.7)
        ell = analytic_multiplier(shape, k, 3.0, 1.0, power)
        out = apply_L(op, v)
        np.testing.assert_allclose(out.components, ell * v.components,
                                   rtol=1e-10, atol=1e-10 * ell)

    def test_constant_field_scales_by_gamma_power(self):
        shape = GridShape((8, 8, 8))
        op = MetricOperator(shape, alpha=3.0, gamma=2.0, power=3)
        comps = np.zeros((3, 8, 8, 8))
        comps[0] = 1.0
        out = apply_L(op, VectorField(shape, comps))
        np.testing.assert_allclose(out.components, 8.0 * comps, atol=1e-10)

    def test_power_one_matches_direct_stencil(self):
        shape = GridShape((6, 8))
        op = MetricOperator(shape, alpha=2.5, gamma=1.2, power=1)
        dense = dense_stencil_L(shape, 2.5, 1.2, 1)
        v = smooth_field(shape, seed=10, max_abs=1.0)
        np.testing.assert_allclose(apply_L(op, v).components,
                                   dense_apply_L(dense, v), rtol=1e-11, atol=1e-11)

    def test_power_three_matches_dense_matrix_power(self):
        shape = GridShape((6, 6))
        op = MetricOperator(shape, alpha=3.0, gamma=1.0, power=3)
        dense = dense_stencil_L(shape, 3.0, 1.0, 3)
        rng = np.random.default_rng(11)
        v = VectorField(shape, rng.standard_normal((2, 6, 6)))
        np.testing.assert_allclose(apply_L(op, v).components,
                                   dense_apply_L(dense, v), rtol=1e-10, atol=1e-8)

    def test_shape_mismatch(self):
        op = MetricOperator(GridShape((8, 8)))
        with pytest.raises(ShapeMismatchError):
            apply_L(op, VectorField.zeros(GridShape((6, 6))))


class TestApplyK:
    def test_zero(self):
        shape = GridShape((8, 8))
        op = MetricOperator(shape)
        assert np.max(np.abs(apply_K(op, VectorField.zeros(shape)).components)) == 0.0

    def test_round_trip_identity(self):
        shape = GridShape((16, 16))
        op = MetricOperator(shape)
        rng = np.random.default_rng(12)
        v = VectorField(shape, rng.standard_normal((2, 16, 16)))
        back = apply_K(op, apply_L(op, v))
        rel = np.max(np.abs(back.components - v.components)) / np.max(np.abs(v.components))
        assert rel < 1e-10

    def test_single_mode_reciprocal_eigenvalue(self):
        shape = GridShape((16, 16))
        op = MetricOperator(shape, alpha=3.0, gamma=1.0, power=3)
        v = single_mode(shape, (2, 1), amplitude=1.3)
        ell = analytic_multiplier(shape, (2, 1), 3.0, 1.0, 3)
        out = apply_K(op, v)
        np.testing.assert_allclose(out.components, v.components / ell, atol=1e-12)


class TestLinearityAndAdjointness:
    def test_linearity(self):
        shape = GridShape((12, 12))
        op = MetricOperator(shape)
        rng = np.random.default_rng(13)
        for _ in range(5):
            v = VectorField(shape, rng.standard_normal((2, 12, 12)))
            w = VectorField(shape, rng.standard_normal((2, 12, 12)))
            a, b = rng.uniform(-2, 2, size=2)
            combo = VectorField(shape, a * v.components + b * w.components)
            for f in (apply_L, apply_K):
                lhs = f(op, combo).components
                rhs = a * f(op, v).components + b * f(op, w).components
                scale = np.max(np.abs(rhs)) + 1e-30
                assert np.max(np.abs(lhs - rhs)) / scale < 1e-10

    def test_self_adjointness(self):
        shape = GridShape((10, 14))
        op = MetricOperator(shape)
        rng = np.random.default_rng(14)
        for _ in range(5):
            v = VectorField(shape, rng.standard_normal((2, 10, 14)))
            w = VectorField(shape, rng.standard_normal((2, 10, 14)))
            lhs = np.sum(apply_L(op, v).components * w.components)
            rhs = np.sum(v.components * apply_L(op, w).components)
            assert abs(lhs - rhs) / max(abs(lhs), 1e-30) < 1e-10


class TestStencilDerivatives:
    def test_constant_field_zero_jacobian_and_divergence(self):
        shape = GridShape((8, 8, 8))
        comps = np.zeros((3, 8, 8, 8))
        comps[0] = 2.0
        comps[2] = -1.0
        v = VectorField(shape, comps)
        assert np.max(np.abs(jacobian_matrix(v))) == 0.0
        assert np.max(np.abs(divergence(v).values)) == 0.0

    def test_sin_mode_derivative_close_to_analytic(self):
        n = 32
        shape = GridShape((n, n, n))
        x = np.indices((n, n, n), dtype=float)[0]
        comps = np.zeros((3, n, n, n))
        comps[0] = np.sin(2 * np.pi * x / n)
        v = VectorField(shape, comps)
        J = jacobian_matrix(v)
        analytic = (2 * np.pi / n) * np.cos(2 * np.pi * x / n)
        assert np.max(np.abs(J[0, 0] - analytic)) < 0.05
        div = divergence(v)
        assert np.max(np.abs(div.values - analytic)) < 0.05

    def test_gradient_field_has_symmetric_jacobian(self):
        n = 32
        shape = GridShape((n, n))
        x, y = np.indices((n, n), dtype=float)
        w = 2 * np.pi / n
        # analytic gradient of sin(wx)sin(wy)
        v = VectorField(shape, np.stack([
            w * np.cos(w * x) * np.sin(w * y),
            w * np.sin(w * x) * np.cos(w * y),
        ]))
        J = jacobian_matrix(v)
        assert np.max(np.abs(J[0, 1] - J[1, 0])) < 5 * (w**2) * (w**2) + 1e-3

    def test_curl_field_divergence_cancels_exactly(self):
        n = 16
        shape = GridShape((n, n))
        x, y = np.indices((n, n), dtype=float)
        w = 2 * np.pi / n
        psi = np.sin(w * x) * np.sin(2 * w * y)
        # discrete curl built from the same central differences as divergence
        from morphatlas.grid import central_difference

        v = VectorField(shape, np.stack([
            -central_difference(psi, axis=1),
            central_difference(psi, axis=0),
        ]))
        assert np.max(np.abs(divergence(v).values)) < 1e-10


class TestSobolevNorm:
    def test_zero_field(self):
        shape = GridShape((8, 8))
        op = MetricOperator(shape)
        assert sobolev_norm_sq(op, VectorField.zeros(shape)) == 0.0

    def test_constant_field_value(self):
        shape = GridShape((8, 8))
        op = MetricOperator(shape, alpha=3.0, gamma=1.5, power=3)
        comps = np.zeros((2, 8, 8))
        comps[0] = 1.0
        v = VectorField(shape, comps)
        assert sobolev_norm_sq(op, v, "ll") == pytest.approx(1.5**6, rel=1e-12)
        assert sobolev_norm_sq(op, v, "lv") == pytest.approx(1.5**3, rel=1e-12)

    def test_single_mode_value(self):
        shape = GridShape((16, 16))
        op = MetricOperator(shape, alpha=3.0, gamma=1.0, power=3)
        amp = 0.9
        v = single_mode(shape, (1, 2), amplitude=amp)
        ell = analytic_multiplier(shape, (1, 2), 3.0, 1.0, 3)
        assert sobolev_norm_sq(op, v, "ll") == pytest.approx(amp**2 * ell**2 / 2, rel=1e-10)
        assert sobolev_norm_sq(op, v, "lv") == pytest.approx(amp**2 * ell / 2, rel=1e-10)

    def test_matches_dense_direct_summation(self):
        shape = GridShape((6, 6))
        op = MetricOperator(shape, alpha=3.0, gamma=1.0, power=3)
        dense = dense_stencil_L(shape, 3.0, 1.0, 3)
        rng = np.random.default_rng(15)
        v = VectorField(shape, rng.standard_normal((2, 6, 6)))
        for kind in ("ll", "lv"):
            assert sobolev_norm_sq(op, v, kind) == pytest.approx(
                dense_sobolev_norm_sq(dense, v, kind), rel=1e-10
            )

    def test_default_kind_follows_operator(self):
        shape = GridShape((8, 8))
        v = smooth_field(shape, seed=16, max_abs=1.0)
        op_ll = MetricConfig(norm_kind="ll").build(shape)
        op_lv = MetricConfig(norm_kind="lv").build(shape)
        assert sobolev_norm_sq(op_ll, v) == sobolev_norm_sq(op_ll, v, "ll")
        assert sobolev_norm_sq(op_lv, v) == sobolev_norm_sq(op_lv, v, "lv")
        assert sobolev_norm_sq(op_ll, v) != sobolev_norm_sq(op_lv, v)
