"""Jacobian determinants, log maps, and separable Gaussian smoothing."""

import math

import numpy as np
import pytest

from morphogate.dbm import (
    DbmConfig,
    JacobianField,
    dbm_pipeline,
    determinant_map,
    gaussian_kernel_1d,
    gaussian_smooth,
    jacobian,
    log_jacobian,
)
from morphogate.errors import GridTooSmall, NonDiffeomorphicField
from morphogate.volume import DeformationField, GridGeometry, ScalarVolume


def field_from(fn, geometry):
    """Sample a displacement function u(points) -> (..., 3) onto a field."""
    pts = geometry.coordinate_grid()
    disp = fn(pts.reshape(-1, 3)).reshape(geometry.dims + (3,))
    return DeformationField(geometry, np.moveaxis(disp, -1, 0))


def affine_field(matrix, geometry):
    grad = np.asarray(matrix, dtype=np.float64) - np.eye(3)
    return field_from(lambda p: p @ grad.T, geometry)


GEOM8 = GridGeometry((8, 8, 8), (1.0, 1.0, 1.0))


class TestJacobian:
    def test_identity_field_gives_identity_matrix(self):
        field = DeformationField(GEOM8, np.zeros((3, 8, 8, 8)))
        jac = jacobian(field)
        expected = np.broadcast_to(np.eye(3), (8, 8, 8, 3, 3))
        np.testing.assert_array_equal(jac.tensor, expected)

    def test_affine_exact_everywhere(self):
        # one-sided first-order differences are exact on linear fields, so the
        # boundary voxels match too
        matrix = np.diag([1.1, 1.0, 1.0])
        jac = jacobian(affine_field(matrix, GEOM8))
        np.testing.assert_allclose(
            jac.tensor, np.broadcast_to(matrix, (8, 8, 8, 3, 3)), atol=1e-12
        )

    def test_affine_exact_with_shear_and_anisotropic_spacing(self):
        geom = GridGeometry((6, 7, 8), (0.5, 1.0, 2.0))
        matrix = np.array([[1.05, 0.02, 0.0], [0.01, 0.97, 0.03], [0.0, -0.02, 1.1]])
        jac = jacobian(affine_field(matrix, geom))
        np.testing.assert_allclose(
            jac.tensor, np.broadcast_to(matrix, geom.dims + (3, 3)), atol=1e-12
        )

    def test_sinusoid_interior_error_bound(self):
        # u1 = 0.05 sin(x1): central differences on the interior are accurate
        # to (h^2/6) * max|u'''| = (h^2/6) * 0.05
        h = 0.5
        geom = GridGeometry((4, 64, 4), (1.0, h, 1.0))

        def fn(p):
            disp = np.zeros_like(p)
            disp[:, 1] = 0.05 * np.sin(p[:, 1])
            return disp

        jac = jacobian(field_from(fn, geom))
        x1 = geom.axis_coords()[1]
        analytic = 1.0 + 0.05 * np.cos(x1)
        numeric = jac.tensor[2, :, 2, 1, 1]
        err = np.abs(numeric[1:-1] - analytic[1:-1])
        assert float(err.max()) <= (h * h / 6.0) * 0.05

    def test_grid_too_small(self):
        geom = GridGeometry((2, 5, 5), (1.0, 1.0, 1.0))
        field = DeformationField(geom, np.zeros((3, 2, 5, 5)))
        with pytest.raises(GridTooSmall):
            jacobian(field)

    def test_tensor_shape_validated(self):
        with pytest.raises(ValueError):
            JacobianField(GEOM8, np.zeros((8, 8, 8, 3, 2)))


class TestDeterminant:
    def test_matches_numpy_det(self):
        # closed-form cofactor expansion against the LAPACK route
        rng = np.random.default_rng(21)
        tensor = np.broadcast_to(np.eye(3), (4, 4, 4, 3, 3)) + 0.2 * rng.normal(
            size=(4, 4, 4, 3, 3)
        )
        jac = JacobianField(GridGeometry((4, 4, 4), (1, 1, 1)), tensor)
        np.testing.assert_allclose(determinant_map(jac), np.linalg.det(tensor), atol=1e-12)

    def test_uniform_scaling_closed_form(self):
        jac = jacobian(affine_field(1.1 * np.eye(3), GEOM8))
        det = determinant_map(jac)
        np.testing.assert_allclose(det, 1.1**3, atol=1e-12)
        assert math.log(float(det[4, 4, 4])) == pytest.approx(3 * math.log(1.1), abs=1e-12)


class TestLogJacobian:
    def _identity_jac(self):
        return jacobian(DeformationField(GEOM8, np.zeros((3, 8, 8, 8))))

    def test_identity_gives_zero_map(self):
        log_map, report = log_jacobian(self._identity_jac())
        np.testing.assert_array_equal(log_map.data, np.zeros((8, 8, 8)))
        assert report.nonpositive_voxels == 0
        assert report.min_det == report.max_det == 1.0

    def test_nonpositive_voxel_fatal_without_clamping(self):
        jac = self._identity_jac()
        jac.tensor[3, 3, 3] = np.diag([-0.5, 1.0, 1.0])
        with pytest.raises(NonDiffeomorphicField):
            log_jacobian(jac, DbmConfig())

    def test_nonpositive_voxel_fatal_even_within_tolerance(self):
        # a tolerated fraction still cannot produce a finite log map
        jac = self._identity_jac()
        jac.tensor[3, 3, 3] = np.diag([-0.5, 1.0, 1.0])
        with pytest.raises(NonDiffeomorphicField):
            log_jacobian(jac, DbmConfig(max_nonpositive_fraction=1.0))

    def test_clamping_floors_bad_voxels(self):
        jac = self._identity_jac()
        jac.tensor[3, 3, 3] = np.diag([-0.5, 1.0, 1.0])
        log_map, report = log_jacobian(jac, DbmConfig(clamp_epsilon=1e-6))
        assert report.nonpositive_voxels == 1
        assert report.min_det == -0.5
        assert log_map.value_at((3, 3, 3)) == pytest.approx(math.log(1e-6))
        assert log_map.value_at((0, 0, 0)) == 0.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DbmConfig(sigma_mm=-1.0)
        with pytest.raises(ValueError):
            DbmConfig(max_nonpositive_fraction=1.5)
        with pytest.raises(ValueError):
            DbmConfig(clamp_epsilon=0.0)

    def test_report_as_dict_keys(self):
        _, report = log_jacobian(self._identity_jac())
        assert set(report.as_dict()) == {"nonpositive_voxels", "min_J", "max_J", "mean_lJ"}


class TestGaussianSmoothing:
    def test_sigma_zero_is_identity_copy(self):
        rng = np.random.default_rng(5)
        vol = ScalarVolume(GEOM8, rng.normal(size=(8, 8, 8)))
        out = gaussian_smooth(vol, 0.0)
        np.testing.assert_array_equal(out.data, vol.data)
        assert out.data is not vol.data

    def test_constant_volume_invariant(self):
        vol = ScalarVolume(GEOM8, np.full((8, 8, 8), 3.25))
        for sigma in (0.5, 1.0, 2.5):
            out = gaussian_smooth(vol, sigma)
            np.testing.assert_allclose(out.data, 3.25, atol=1e-12)

    def test_kernel_normalized_symmetric_radius(self):
        kernel = gaussian_kernel_1d(1.0)
        assert kernel.size == 2 * 3 + 1
        assert float(kernel.sum()) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(kernel, kernel[::-1], atol=0)
        assert gaussian_kernel_1d(1.4).size == 2 * math.ceil(3 * 1.4) + 1

    def test_impulse_matches_kernel_outer_product(self):
        geom = GridGeometry((9, 9, 9), (1.0, 1.0, 1.0))
        data = np.zeros((9, 9, 9))
        data[4, 4, 4] = 1.0
        out = gaussian_smooth(ScalarVolume(geom, data), 1.0)
        k = gaussian_kernel_1d(1.0)
        expected = np.zeros((9, 9, 9))
        expected[1:8, 1:8, 1:8] = np.einsum("i,j,k->ijk", k, k, k)
        np.testing.assert_allclose(out.data, expected, atol=1e-15)
        assert float(out.data.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_dense_convolution_oracle_with_replicate_edges(self):
        # brute-force separable convolution with explicit edge padding,
        # anisotropic spacing so each axis gets its own kernel
        geom = GridGeometry((7, 6, 5), (1.0, 2.0, 0.5))
        rng = np.random.default_rng(17)
        data = rng.normal(size=geom.dims)
        sigma = 1.2

        expected = data
        for axis, spacing in enumerate(geom.spacing):
            kernel = gaussian_kernel_1d(sigma / spacing)
            radius = kernel.size // 2
            pad = [(0, 0)] * 3
            pad[axis] = (radius, radius)
            padded = np.pad(expected, pad, mode="edge")
            acc = np.zeros_like(expected)
            for tap in range(kernel.size):
                sl = [slice(None)] * 3
                sl[axis] = slice(tap, tap + expected.shape[axis])
                acc += kernel[tap] * padded[tuple(sl)]
            expected = acc

        out = gaussian_smooth(ScalarVolume(geom, data), sigma)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_negative_sigma_rejected(self):
        vol = ScalarVolume(GEOM8, np.zeros((8, 8, 8)))
        with pytest.raises(ValueError):
            gaussian_smooth(vol, -0.1)


class TestPipeline:
    def test_identity_field_gives_zero_volume(self):
        field = DeformationField(GEOM8, np.zeros((3, 8, 8, 8)))
        lj, report = dbm_pipeline(field)
        np.testing.assert_array_equal(lj.data, np.zeros((8, 8, 8)))
        assert report.mean_log == 0.0

    def test_affine_constant_log(self):
        field = affine_field(np.diag([1.1, 1.0, 1.0]), GEOM8)
        lj, report = dbm_pipeline(field, DbmConfig(sigma_mm=0.0))
        np.testing.assert_allclose(lj.data, math.log(1.1), atol=1e-12)
        assert report.mean_log == pytest.approx(0.0953102, abs=1e-6)

    def test_matches_composition_of_stages(self):
        from morphogate.cohort import RadialBumpWarp

        geom = GridGeometry((16, 16, 16), (1.0, 1.0, 1.0))
        warp = RadialBumpWarp(center=(7.5, 7.5, 7.5), radius=4.0, amplitude=0.05)
        field = warp.sample(geom)
        cfg = DbmConfig(sigma_mm=1.0)
        lj, report = dbm_pipeline(field, cfg)
        manual = gaussian_smooth(log_jacobian(jacobian(field), cfg)[0], cfg.sigma_mm)
        assert float(np.max(np.abs(lj.data - manual.data))) <= 1e-12
        assert report.mean_log == pytest.approx(float(manual.data.mean()), abs=1e-15)

    def test_radial_bump_against_analytic_jacobian(self):
        # second-order interior accuracy: halving the spacing over the same
        # physical domain shrinks the max interior error close to 4x
        from morphogate.cohort import RadialBumpWarp

        warp = RadialBumpWarp(center=(15.5, 15.5, 15.5), radius=4.0, amplitude=0.05)
        errs = []
        for dims, h in (((32, 32, 32), 1.0), ((63, 63, 63), 0.5)):
            geom = GridGeometry(dims, (h, h, h))
            lj, _ = dbm_pipeline(warp.sample(geom), DbmConfig(sigma_mm=0.0))
            analytic = warp.jacobian_det(geom.coordinate_grid().reshape(-1, 3)).reshape(dims)
            err = np.abs(np.exp(lj.data) - analytic)[1:-1, 1:-1, 1:-1]
            errs.append(float(err.max()))
        assert errs[0] < 1e-2
        assert errs[0] / errs[1] >= 3.5
