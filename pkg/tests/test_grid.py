"""Grid containers, interpolation, warping, composition, Jacobians."""

import numpy as np
import pytest

from morphatlas import (
    DeformationPair,
    GridShape,
    ScalarImage,
    ShapeMismatchError,
    VectorField,
    compose_maps,
    interpolate,
    jacobian_determinant,
    warp_image,
)
from morphatlas.grid import identity_coords, sample_periodic

from helpers import brute_force_interp, brute_force_warp, stencil_jacobian_det


class TestGridShape:
    def test_defaults_and_properties(self):
        shape = GridShape((8, 12))
        assert shape.d == 2
        assert shape.spacing == (1.0, 1.0)
        assert shape.num_voxels == 96

    @pytest.mark.parametrize("dims", [(3, 8), (8,), (4, 4, 4, 4)])
    def test_rejects_bad_dims(self, dims):
        with pytest.raises(ValueError):
            GridShape(dims)

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            GridShape((8, 8), (1.0, -1.0))
        with pytest.raises(ValueError):
            GridShape((8, 8), (1.0,))


class TestContainers:
    def test_scalar_image_validates_shape_and_finiteness(self):
        shape = GridShape((4, 4))
        with pytest.raises(ShapeMismatchError):
            ScalarImage(shape, np.zeros((4, 5)))
        with pytest.raises(ValueError):
            ScalarImage(shape, np.full((4, 4), np.nan))

    def test_vector_field_component_layout(self):
        shape = GridShape((4, 6))
        field = VectorField.zeros(shape)
        assert field.components.shape == (2, 4, 6)
        with pytest.raises(ShapeMismatchError):
            VectorField(shape, np.zeros((3, 4, 6)))

    def test_deformation_pair_rejects_folds(self):
        shape = GridShape((4, 4))
        bad_det = ScalarImage(shape, np.full((4, 4), -0.5))
        with pytest.raises(ValueError):
            DeformationPair(VectorField.zeros(shape), VectorField.zeros(shape), bad_det)


class TestInterpolate:
    def test_identity_sampling_is_exact(self):
        rng = np.random.default_rng(0)
        img = ScalarImage.from_array(rng.standard_normal((6, 5)))
        out = interpolate(img, identity_coords(img.shape))
        assert np.array_equal(out, img.values)

    def test_linear_ramp_midpoint(self):
        # ramp along axis 0, constant along axis 1
        vals = np.tile(np.arange(4.0)[:, None], (1, 4))
        img = ScalarImage.from_array(vals)
        query = np.array([[[1.5]], [[0.0]]])
        assert interpolate(img, query)[0, 0] == pytest.approx(1.5)

    def test_periodic_wrap_matches_brute_force(self):
        rng = np.random.default_rng(1)
        img = ScalarImage.from_array(rng.standard_normal((4, 4)))
        a = interpolate(img, np.array([[[-0.5]], [[1.25]]]))[0, 0]
        b = interpolate(img, np.array([[[3.5]], [[1.25]]]))[0, 0]
        assert a == pytest.approx(b, abs=1e-14)
        assert a == pytest.approx(brute_force_interp(img.values, (-0.5, 1.25)), abs=1e-14)

    def test_random_queries_match_brute_force_2d_and_3d(self):
        rng = np.random.default_rng(2)
        for dims in [(5, 6), (4, 5, 6)]:
            img = ScalarImage.from_array(rng.standard_normal(dims))
            pts = rng.uniform(-8, 12, size=(len(dims), 40))
            got = sample_periodic(img.values, pts)
            want = [brute_force_interp(img.values, tuple(p)) for p in pts.T]
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rejects_wrong_leading_dim(self):
        img = ScalarImage.zeros(GridShape((4, 4)))
        with pytest.raises(ShapeMismatchError):
            interpolate(img, np.zeros((3, 4, 4)))


class TestWarpImage:
    def test_zero_displacement_is_identity(self):
        rng = np.random.default_rng(3)
        img = ScalarImage.from_array(rng.standard_normal((8, 8)))
        out = warp_image(img, VectorField.zeros(img.shape))
        assert np.max(np.abs(out.values - img.values)) == 0.0

    def test_integer_shift_is_circular_roll(self):
        rng = np.random.default_rng(4)
        img = ScalarImage.from_array(rng.standard_normal((8, 8)))
        disp = np.zeros((2, 8, 8))
        disp[0] = 1.0
        out = warp_image(img, VectorField(img.shape, disp))
        # output(x) = img(x + e0): content rolls toward lower indices
        np.testing.assert_allclose(out.values, np.roll(img.values, -1, axis=0),
                                   atol=1e-14)

    def test_sinusoidal_displacement_matches_per_voxel_oracle(self):
        n = 16
        shape = GridShape((n, n))
        x, y = np.indices((n, n), dtype=float)
        img = ScalarImage(shape, np.sin(2 * np.pi * x / n) + np.cos(4 * np.pi * y / n))
        disp = np.stack([
            0.8 * np.sin(2 * np.pi * y / n),
            0.5 * np.cos(2 * np.pi * x / n),
        ])
        out = warp_image(img, VectorField(shape, disp))
        np.testing.assert_allclose(out.values, brute_force_warp(img.values, disp),
                                   atol=1e-12)

    def test_shape_mismatch_raises(self):
        img = ScalarImage.zeros(GridShape((4, 4)))
        with pytest.raises(ShapeMismatchError):
            warp_image(img, VectorField.zeros(GridShape((6, 6))))


def constant_shift(shape, vec):
    disp = np.zeros((shape.d,) + shape.dims)
    for ax, val in enumerate(vec):
        disp[ax] = val
    return VectorField(shape, disp)


class TestComposeMaps:
    def test_identity_inner_and_outer(self):
        shape = GridShape((8, 8))
        rng = np.random.default_rng(5)
        u = VectorField(shape, 0.5 * rng.standard_normal((2, 8, 8)))
        zero = VectorField.zeros(shape)
        np.testing.assert_array_equal(compose_maps(u, zero).components, u.components)
        np.testing.assert_allclose(compose_maps(zero, u).components, u.components,
                                   atol=1e-14)

    def test_translation_group(self):
        shape = GridShape((8, 8))
        a = constant_shift(shape, (0.75, -1.25))
        b = constant_shift(shape, (2.0, 0.5))
        ab = compose_maps(a, b)
        np.testing.assert_allclose(ab.components,
                                   constant_shift(shape, (2.75, -0.75)).components,
                                   atol=1e-13)

    def test_associativity_for_constant_shifts(self):
        shape = GridShape((8, 8))
        a = constant_shift(shape, (0.3, 1.1))
        b = constant_shift(shape, (-0.7, 0.2))
        c = constant_shift(shape, (1.9, -0.4))
        left = compose_maps(compose_maps(a, b), c)
        right = compose_maps(a, compose_maps(b, c))
        np.testing.assert_allclose(left.components, right.components, atol=1e-13)

    def test_associativity_for_smooth_fields(self):
        n = 32
        shape = GridShape((n, n))
        x, y = np.indices((n, n), dtype=float)
        w = 2 * np.pi / n
        fields = []
        for kx, ky, amp in [(1, 2, 0.5), (2, 1, 0.4), (1, 1, 0.6)]:
            fields.append(VectorField(shape, np.stack([
                amp * np.sin(kx * w * x) * np.cos(ky * w * y),
                amp * np.cos(kx * w * x) * np.sin(ky * w * y),
            ])))
        a, b, c = fields
        left = compose_maps(compose_maps(a, b), c)
        right = compose_maps(a, compose_maps(b, c))
        # multilinear interpolation error bound: (d/8) h^2 max|second diff|
        second = max(
            np.max(np.abs(np.roll(f.components, -1, ax) - 2 * f.components
                          + np.roll(f.components, 1, ax)))
            for f in fields for ax in (1, 2)
        )
        bound = 2 * (2 / 8) * second
        assert np.max(np.abs(left.components - right.components)) < bound


class TestJacobianDeterminant:
    def test_zero_displacement_gives_one(self):
        shape = GridShape((8, 8, 8))
        det = jacobian_determinant(VectorField.zeros(shape))
        assert np.array_equal(det.values, np.ones((8, 8, 8)))

    def test_constant_shift_gives_one_exactly(self):
        for dims in [(8, 8), (6, 6, 6)]:
            shape = GridShape(dims)
            det = jacobian_determinant(constant_shift(shape, (1.7, -0.3, 0.9)[: len(dims)]))
            assert np.array_equal(det.values, np.ones(dims))

    def test_sinusoidal_field_matches_independent_stencil(self):
        n = 16
        shape = GridShape((n, n))
        x, y = np.indices((n, n), dtype=float)
        w = 2 * np.pi / n
        disp = 0.1 * np.stack([np.sin(w * x) * np.cos(w * y),
                               np.cos(2 * w * x) * np.sin(w * y)])
        det = jacobian_determinant(VectorField(shape, disp))
        np.testing.assert_allclose(det.values, stencil_jacobian_det(disp),
                                   rtol=1e-12, atol=1e-12)

    def test_3d_matches_independent_stencil(self):
        rng = np.random.default_rng(7)
        shape = GridShape((6, 6, 6))
        disp = 0.15 * rng.standard_normal((3, 6, 6, 6))
        det = jacobian_determinant(VectorField(shape, disp))
        np.testing.assert_allclose(det.values, stencil_jacobian_det(disp),
                                   rtol=1e-11, atol=1e-11)
