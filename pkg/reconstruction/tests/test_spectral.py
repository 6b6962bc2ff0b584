from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from reconstruction.denoiser import KernelDenoiser, KernelParams, WindowProfile, build_kernel, make_guide, symmetrize
from reconstruction.exceptions import ConfigError, VerificationError
from reconstruction.forward import BlurKernel, ForwardModel, InpaintingMask, apply_forward
from reconstruction.image_io import synthetic_image
from reconstruction.linop import LinearMap, VecImage
from reconstruction.solver import Algorithm, LossSpec
from reconstruction.spectral import (
    OperatorKind,
    PowerConfig,
    SpectralReport,
    check_fe_closed_form,
    contraction_report,
    lambda2,
    make_update_operator,
    power_sigma,
    power_sigma_D,
    zeta_star,
)

TIGHT = PowerConfig(tol=1e-12, max_iters=100000)
GRID = PowerConfig(tol=1e-10, max_iters=20000)


def random_guide(width, height, seed=0):
    return VecImage(np.random.default_rng(seed).uniform(size=width * height), width, height)


def denoiser_from_spectrum(eigenvalues, vectors):
    """W = ee/n + Σ λᵢ vᵢvᵢᵀ, wrapped with D = I."""
    n = vectors.shape[0]
    W = np.full((n, n), 1.0 / n)
    for value, v in zip(eigenvalues, vectors.T):
        W += value * np.outer(v, v)
    return KernelDenoiser.from_kernel_matrix(W)


def instance(task, size=8, seed=0, mu=0.3, stride=2):
    image = synthetic_image(size, size)
    if task == 'inpainting':
        model = ForwardModel.inpainting(InpaintingMask.random(size, size, mu, seed=seed))
    elif task == 'deblurring':
        model = ForwardModel.deblurring(size, size, BlurKernel.gaussian(5, 1.0))
    else:
        model = ForwardModel.superresolution(size, size, BlurKernel.gaussian(5, 1.0), stride=stride)
    b = apply_forward(model, image)
    return LossSpec(model, b), make_guide(model, b)


def acceptance_models(size=16, seed=11):
    blur = BlurKernel.gaussian(5, 1.0)
    for mu in (0.1, 0.3, 0.5):
        yield ForwardModel.inpainting(InpaintingMask.random(size, size, mu, seed=seed))
    yield ForwardModel.deblurring(size, size, blur)
    yield ForwardModel.superresolution(size, size, blur, stride=2)


class UpdateOperatorTests(SimpleTestCase):

    def setUp(self):
        self.model = ForwardModel.inpainting(InpaintingMask.full(4, 4))
        self.den = build_kernel(random_guide(4, 4), KernelParams(0.5))

    def test_unit_step_on_identity_operator_is_zero(self):
        G = make_update_operator(OperatorKind.G, self.model, None, 1.0)
        x = np.random.default_rng(0).standard_normal(16)
        np.testing.assert_array_equal(G.apply(x), np.zeros(16))

    def test_reflected_denoiser_fixes_constants(self):
        V = make_update_operator('V', self.model, self.den, 0.0)
        np.testing.assert_allclose(V.apply(np.ones(16)), np.ones(16), rtol=0, atol=1e-12)

    def test_reflected_resolvent_kills_observed_constants(self):
        F = make_update_operator(OperatorKind.F, self.model, None, 1.0)
        np.testing.assert_allclose(F.apply(np.ones(16)), np.zeros(16), rtol=0, atol=1e-10)

    def test_P_matches_dense(self):
        model = ForwardModel.deblurring(4, 4, BlurKernel.uniform(3))
        P = make_update_operator(OperatorKind.P_S, model, self.den, 0.8).to_dense()
        A = model.as_linear_map().to_dense()
        W = self.den.dense_W()
        expected = W @ (np.eye(16) - 0.8 * np.diag(1.0 / self.den.D.d) @ A.T @ A)
        np.testing.assert_allclose(P, expected, rtol=0, atol=1e-12)

    def test_J_matches_dense(self):
        model = ForwardModel.superresolution(4, 4, BlurKernel.uniform(3), stride=2)
        J = make_update_operator(OperatorKind.J_S, model, self.den, 2.0).to_dense()
        A = model.as_linear_map().to_dense()
        D = np.diag(self.den.D.d)
        L = np.linalg.solve(D + 2.0 * A.T @ A, D)
        V = 2.0 * self.den.dense_W() - np.eye(16)
        np.testing.assert_allclose(J, (2.0 * L - np.eye(16)) @ V, rtol=0, atol=1e-9)

    def test_unknown_kind(self):
        with self.assertRaises(ConfigError):
            make_update_operator('Q', self.model, self.den, 1.0)

    def test_step_out_of_range(self):
        with self.assertRaises(ConfigError):
            make_update_operator(OperatorKind.P, self.model, self.den, 2.5)


class PowerSigmaTests(SimpleTestCase):

    def test_diagonal(self):
        report = power_sigma(LinearMap.diagonal([3.0, 1.0]))
        self.assertAlmostEqual(report.value, 3.0, places=6)
        self.assertTrue(report.converged)

    def test_zero_map(self):
        report = power_sigma(LinearMap.zero(5))
        self.assertEqual(report.value, 0.0)
        self.assertTrue(report.converged)

    def test_matches_svd(self):
        M = np.random.default_rng(1).standard_normal((16, 16))
        report = power_sigma(LinearMap.from_matrix(M), TIGHT)
        expected = np.linalg.norm(M, 2)
        self.assertLess(abs(report.value - expected) / expected, 1e-6)

    def test_d_norm_of_plain_denoiser_is_one(self):
        den = build_kernel(random_guide(8, 8, seed=2), KernelParams(0.5))
        report = power_sigma_D(den.as_linear_map(), den.D, TIGHT)
        self.assertAlmostEqual(report.value, 1.0, places=6)

    def test_scaled_update_matches_dense_oracle(self):
        loss, guide = instance('inpainting', size=12, seed=3)
        den = build_kernel(guide, KernelParams(0.3))
        P = make_update_operator(OperatorKind.P_S, loss, den, 1.0).to_dense()
        root = np.sqrt(den.D.d)
        expected = np.linalg.norm(root[:, None] * P / root[None, :], 2)
        measured = power_sigma_D(make_update_operator(OperatorKind.P_S, loss, den, 1.0), den.D, TIGHT).value
        self.assertLess(abs(measured - expected) / expected, 1e-6)


class DeflatedEigenvalueTests(SimpleTestCase):

    def test_all_ones_kernel(self):
        den = KernelDenoiser.from_kernel_matrix(np.ones((4, 4)))
        self.assertEqual(lambda2(den).value, 0.0)

    def test_two_pixel_denoiser(self):
        den = KernelDenoiser.from_kernel_matrix(np.array([[1.0, 0.25], [0.25, 1.0]]))
        np.testing.assert_allclose(den.dense_W(), [[0.8, 0.2], [0.2, 0.8]])
        self.assertAlmostEqual(lambda2(den).value, 0.6, places=12)
        self.assertAlmostEqual(lambda2(den, method='symmetric').value, 0.6, places=12)

    def test_lambda2_matches_dense_eigenvalues(self):
        den = build_kernel(random_guide(8, 8, seed=4), KernelParams(1.0))
        eigenvalues = np.sort(np.linalg.eigvals(den.dense_W()).real)
        for method in ('brauer', 'symmetric'):
            value = lambda2(den, TIGHT, method=method).value
            self.assertLess(abs(value - eigenvalues[-2]), 1e-6, method)

    def test_zeta_star_with_opposite_pair(self):
        u = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
        v = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
        den = denoiser_from_spectrum([0.9, 0.1], np.column_stack([u, v]))
        report = zeta_star(den, TIGHT)
        self.assertAlmostEqual(report.value, 0.8, places=10)
        self.assertTrue(report.converged)

    def test_zeta_star_vanishes_at_one_half(self):
        u = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
        v = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
        den = denoiser_from_spectrum([0.5, 0.5], np.column_stack([u, v]))
        self.assertEqual(zeta_star(den).value, 0.0)

    def test_zeta_star_matches_dense_eigenvalues(self):
        den = build_kernel(random_guide(8, 8, seed=5), KernelParams(1.0))
        eigenvalues = np.sort(np.linalg.eigvals(den.dense_W()).real)[:-1]
        expected = np.max(np.abs(2.0 * eigenvalues - 1.0))
        self.assertLess(abs(zeta_star(den, TIGHT).value - expected), 1e-6)

    def test_unknown_method(self):
        den = KernelDenoiser.from_kernel_matrix(np.ones((2, 2)))
        with self.assertRaises(ConfigError):
            lambda2(den, method='shift')


class ContractionReportTests(SimpleTestCase):

    def test_symmetric_denoiser_deblurring(self):
        loss, guide = instance('deblurring')
        den = symmetrize(build_kernel(guide, KernelParams(0.3)))
        for gamma in (0.5, 1.0, 1.5):
            report = contraction_report(loss, den, Algorithm.PNP_ISTA, gamma, TIGHT)
            self.assertLess(report.measured, 1.0)
            self.assertTrue(report.theorem_applies)
            self.assertEqual(report.bound.formula_id, 'ista_plain_deblurring')

    def test_plain_denoiser_scaled_inpainting(self):
        loss, guide = instance('inpainting', size=12, seed=6)
        den = build_kernel(guide, KernelParams(0.3))
        report = contraction_report(loss, den, Algorithm.SC_PNP_ISTA, 1.0, TIGHT)
        self.assertEqual(report.norm, 'D')
        self.assertLess(report.measured, 1.0)
        self.assertLessEqual(report.measured, report.bound.bound + 1e-6)
        self.assertTrue(report.holds)

    def test_scaled_algorithms_hold_across_parameters(self):
        for task in ('inpainting', 'deblurring', 'superresolution'):
            loss, guide = instance(task, seed=7)
            den = build_kernel(guide, KernelParams(0.3))
            for gamma in (0.1, 0.5, 1.0, 1.5, 1.9):
                report = contraction_report(loss, den, Algorithm.SC_PNP_ISTA, gamma, GRID)
                self.assertLess(report.measured, 1.0 - 1e-9, (task, gamma))
                self.assertLessEqual(report.measured, report.bound.bound + 1e-6, (task, gamma))
            for rho in (0.1, 1.0, 10.0):
                report = contraction_report(loss, den, Algorithm.SC_PNP_ADMM, rho, GRID)
                self.assertLess(report.measured, 1.0 - 1e-9, (task, rho))
                self.assertLessEqual(report.measured, report.bound.bound + 1e-6, (task, rho))

    def test_plain_denoiser_without_scaling_has_no_guarantee(self):
        loss, guide = instance('deblurring')
        den = build_kernel(guide, KernelParams(0.3))
        report = contraction_report(loss, den, Algorithm.PNP_ISTA, 1.0)
        self.assertFalse(report.theorem_applies)
        self.assertIsNone(report.bound)
        self.assertTrue(report.holds)
        self.assertTrue(report.notes)

    def test_plain_denoiser_inpainting_contracts_in_d_norm(self):
        loss, guide = instance('inpainting', size=12, seed=6)
        den = build_kernel(guide, KernelParams(0.3))
        observed = loss.model.mask.observed
        W = den.dense_W()
        root = np.sqrt(den.D.d)
        for gamma in (0.1, 1.0, 1.9):
            report = contraction_report(loss, den, Algorithm.PNP_ISTA, gamma, TIGHT)
            self.assertEqual(report.norm, 'D')
            self.assertTrue(report.theorem_applies)
            self.assertEqual(report.bound.formula_id, 'ista_kernel_inpainting')
            self.assertLess(report.measured, 1.0 - 1e-9, gamma)
            self.assertLessEqual(report.measured, report.bound.bound + 1e-6, gamma)
            self.assertLess(report.bound.bound, 1.0)
            P = W * (1.0 - gamma * observed)[None, :]
            expected = np.linalg.norm(root[:, None] * P / root[None, :], 2)
            self.assertLess(abs(report.measured - expected) / expected, 1e-6, gamma)

    def test_near_binary_guide_expands_euclidean_norm_only(self):
        guide = VecImage(np.r_[np.zeros(7), 1.0], 8, 1)
        params = KernelParams(0.5, window_radius=4, patch_radius=0, window_profile=WindowProfile.BOX)
        den = build_kernel(guide, params)
        self.assertEqual(den.K.nnz, 64)
        self.assertGreater(np.linalg.norm(den.dense_W(), 2), 1.01)
        model = ForwardModel.inpainting(InpaintingMask.full(8, 1))
        gamma = 0.005
        euclidean = power_sigma(make_update_operator(OperatorKind.P, model, den, gamma), TIGHT).value
        self.assertGreater(euclidean, 1.005)
        scaled = contraction_report(model, den, Algorithm.SC_PNP_ISTA, gamma, TIGHT)
        self.assertLess(scaled.measured, 1.0)
        self.assertTrue(scaled.holds)
        plain = contraction_report(model, den, Algorithm.PNP_ISTA, gamma, TIGHT)
        self.assertEqual(plain.norm, 'D')
        self.assertAlmostEqual(plain.measured, 1.0 - gamma, places=8)

    def test_symmetric_admm_superresolution_has_no_bound(self):
        loss, guide = instance('superresolution')
        den = symmetrize(build_kernel(guide, KernelParams(0.3)))
        report = contraction_report(loss, den, Algorithm.PNP_ADMM, 1.0, strict=False)
        self.assertIsNone(report.bound)
        self.assertIn('no closed-form bound for this task', report.notes)

    def test_scaled_algorithm_needs_plain_denoiser(self):
        loss, guide = instance('deblurring')
        den = symmetrize(build_kernel(guide, KernelParams(0.3)))
        with self.assertRaises(ConfigError):
            contraction_report(loss, den, Algorithm.SC_PNP_ADMM, 1.0)

    def test_factor_decreases_with_more_observed_pixels(self):
        image = synthetic_image(8, 8)
        den = build_kernel(image, KernelParams(0.3))
        measured = []
        for mu in (0.1, 0.3, 0.5, 0.7, 0.9):
            model = ForwardModel.inpainting(InpaintingMask.random(8, 8, mu, seed=8))
            P = make_update_operator(OperatorKind.P_S, model, den, 1.0)
            measured.append(power_sigma_D(P, den.D, TIGHT).value)
        for smaller, larger in zip(measured, measured[1:]):
            self.assertLessEqual(larger, smaller + 1e-4)

    def test_spectral_gap_widens_with_bandwidth(self):
        loss, guide = instance('deblurring')
        narrow = symmetrize(build_kernel(guide, KernelParams(0.1)))
        wide = symmetrize(build_kernel(guide, KernelParams(0.8)))
        self.assertGreater(lambda2(narrow, TIGHT).value, lambda2(wide, TIGHT).value)

    def test_json_ready(self):
        loss, guide = instance('deblurring')
        report = contraction_report(loss, build_kernel(guide, KernelParams(0.3)), 'sc_pnp_ista', 1.0)
        data = report.as_dict()
        self.assertEqual(data['algorithm'], 'sc_pnp_ista')
        self.assertEqual(data['spectral_quantity'], 'lambda2')
        self.assertEqual(data['bound']['formula_id'], 'ista_scaled')


class ParameterGridTests(SimpleTestCase):

    def assertContracts(self, report, label):
        self.assertLess(report.measured, 1.0 - 1e-9, label)
        self.assertLessEqual(report.measured, report.bound.bound + 1e-6, label)
        self.assertLess(report.bound.bound, 1.0, label)

    def test_scaled_algorithms_on_random_guides(self):
        for seed in (21, 22, 23):
            den = build_kernel(random_guide(16, 16, seed=seed), KernelParams(1.0))
            for model in acceptance_models():
                label = (seed, model.kind.value, round(model.mu, 3))
                for gamma in (0.1, 0.5, 1.0, 1.5, 1.9):
                    report = contraction_report(model, den, Algorithm.SC_PNP_ISTA, gamma, GRID, strict=False)
                    self.assertContracts(report, label + (gamma,))
                for rho in (0.1, 1.0, 10.0):
                    report = contraction_report(model, den, Algorithm.SC_PNP_ADMM, rho, GRID, strict=False)
                    self.assertContracts(report, label + (rho,))

    def test_inpainting_factor_does_not_grow_with_sampling_rate(self):
        den = build_kernel(synthetic_image(32, 32), KernelParams(0.3))
        scaled, plain = [], []
        for mu in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
            model = ForwardModel.inpainting(InpaintingMask.random(32, 32, mu, seed=12))
            scaled.append(power_sigma_D(make_update_operator(OperatorKind.P_S, model, den, 1.0), den.D, GRID).value)
            plain.append(power_sigma_D(make_update_operator(OperatorKind.P, model, den, 1.0), den.D, GRID).value)
        for values in (scaled, plain):
            for smaller_mu, larger_mu in zip(values, values[1:]):
                self.assertLessEqual(larger_mu, smaller_mu + 1e-4)
        self.assertLess(scaled[-1], scaled[0])

    def test_superresolution_factor_grows_with_stride(self):
        den = build_kernel(synthetic_image(32, 32), KernelParams(0.3))
        measured = []
        for stride in (2, 4, 8):
            model = ForwardModel.superresolution(32, 32, BlurKernel.gaussian(5, 1.0), stride=stride)
            J = make_update_operator(OperatorKind.J_S, model, den, 1.0)
            measured.append(0.5 * (1.0 + power_sigma_D(J, den.D, GRID).value))
        for finer, coarser in zip(measured, measured[1:]):
            self.assertLessEqual(finer, coarser + 1e-4)
        self.assertLess(measured[-1], 1.0)

    def test_wider_bandwidth_shrinks_gap_and_norm(self):
        loss, guide = instance('deblurring')
        gaps, norms = [], []
        for h in (0.1, 0.2, 0.4, 0.8):
            den = symmetrize(build_kernel(guide, KernelParams(h)))
            gaps.append(lambda2(den, TIGHT).value)
            norms.append(power_sigma(make_update_operator(OperatorKind.P, loss, den, 1.0), TIGHT).value)
        for values in (gaps, norms):
            for narrow, wide in zip(values, values[1:]):
                self.assertLessEqual(wide, narrow + 1e-4)
        self.assertGreater(gaps[0], gaps[-1])


class FeClosedFormCheckTests(SimpleTestCase):

    def test_inpainting_pattern(self):
        model = ForwardModel.inpainting(InpaintingMask(np.array([True, True, False, False]), 4, 1))
        measured, expected = check_fe_closed_form(model, 1.0)
        np.testing.assert_allclose(measured, [0.0, 0.0, 1.0, 1.0], rtol=0, atol=1e-10)
        np.testing.assert_array_equal(expected, [0.0, 0.0, 1.0, 1.0])

    def test_grid_of_rho_and_mu(self):
        for rho in (0.5, 1.0, 3.0):
            check_fe_closed_form(ForwardModel.deblurring(8, 8, BlurKernel.gaussian(5, 1.0)), rho)
            for mu in (0.25, 0.5, 1.0):
                check_fe_closed_form(ForwardModel.inpainting(InpaintingMask.random(8, 8, mu, seed=9)), rho)

    def test_deblurring_value(self):
        measured, _ = check_fe_closed_form(ForwardModel.deblurring(4, 4, BlurKernel.uniform(3)), 3.0)
        np.testing.assert_allclose(measured, np.full(16, -0.5), rtol=0, atol=1e-10)


class PowerSettingsTests(SimpleTestCase):

    @override_settings(PNP_POWER_TOL=1e-6, PNP_POWER_MAX_ITERS=10)
    def test_from_settings(self):
        config = PowerConfig.from_settings(seed=3)
        self.assertEqual((config.tol, config.max_iters, config.seed), (1e-6, 10, 3))

    def test_rejects_bad_values(self):
        with self.assertRaises(ConfigError):
            PowerConfig(tol=0.0)


class StrictModeTests(SimpleTestCase):

    def test_failures_are_listed(self):
        loss, guide = instance('deblurring')
        den = build_kernel(guide, KernelParams(0.3))
        report = contraction_report(loss, den, Algorithm.SC_PNP_ISTA, 1.0, strict=False)
        report.measured = 2.0
        self.assertFalse(report.holds)
        self.assertEqual(len(report.failures()), 2)

    def test_violation_raises(self):
        loss, guide = instance('deblurring')
        den = build_kernel(guide, KernelParams(0.3))
        with mock.patch('reconstruction.spectral.power_sigma_D', return_value=SpectralReport(1.5, 1, True)):
            with self.assertRaises(VerificationError) as ctx:
                contraction_report(loss, den, Algorithm.SC_PNP_ISTA, 1.0)
        self.assertEqual(ctx.exception.measured, 1.5)
