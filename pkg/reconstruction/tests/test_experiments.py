import json
import math
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, override_settings

from reconstruction.denoiser import DenoiserMode
from reconstruction.exceptions import ConfigError, VerificationError
from reconstruction.experiments import (
    ExperimentConfig,
    SweepGrid,
    build_instance,
    execute,
    json_safe,
    run_counterexample,
    run_denoise,
    run_reconstruct,
    run_sweep,
    run_verify,
    sweep_points,
)
from reconstruction.forward import ForwardKind
from reconstruction.image_io import read_pgm, synthetic_image
from reconstruction.solver import Algorithm, SolverConfig
from reconstruction.spectral import PowerConfig, contraction_report

TIGHT = PowerConfig(tol=1e-12, max_iters=100000)
GRID = PowerConfig(tol=1e-10, max_iters=20000)


class ExperimentTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def config(self, **overrides):
        base = dict(width=8, height=8, blur_size=3, output_dir=str(self.out), power=GRID, trials=100)
        base.update(overrides)
        return ExperimentConfig(**base)


class ExperimentConfigTests(ExperimentTestCase):

    def test_overrides(self):
        config = self.config()
        self.assertIs(config.with_overrides(), config)
        changed = config.with_overrides(output_dir=Path('/tmp/x'), seed=7, threads=2)
        self.assertEqual((changed.output_dir, changed.seed, changed.threads), ('/tmp/x', 7, 2))
        self.assertEqual(config.seed, 0)

    def test_output_dir_falls_back_to_settings(self):
        with override_settings(PNP_OUTPUT_DIR=self.out / 'fallback', PNP_THREADS=3):
            config = ExperimentConfig()
            self.assertEqual(config.out_dir, self.out / 'fallback')
            self.assertEqual(config.worker_count, 3)

    def test_dense_limit_falls_back_to_settings(self):
        with override_settings(PNP_DENSE_LIMIT=32):
            self.assertEqual(ExperimentConfig().oracle_limit, 32)
            self.assertEqual(ExperimentConfig(dense_limit=10).oracle_limit, 10)
            checks = run_verify(self.config(), write_outputs=False)
        self.assertNotIn('eigen_deficit', [check.check for check in checks])
        self.assertTrue(all(check.passed for check in checks))


class CounterexampleRunTests(ExperimentTestCase):

    def test_smallest_case(self):
        rows = run_counterexample(3, out_dir=self.out)
        self.assertEqual(len(rows), 1)
        self.assertAlmostEqual(rows[0]['dense_norm'], math.sqrt(10) / 3, places=10)
        self.assertAlmostEqual(rows[0]['ratio'], 1.0, places=10)
        header = (self.out / 'counterexample.csv').read_text().splitlines()[0]
        self.assertEqual(header, 'n,dense_norm,closed_form,ratio,epsilon,epsilon_norm')

    def test_full_table(self):
        rows = run_counterexample(64)
        self.assertEqual([row['n'] for row in rows], list(range(3, 65)))
        self.assertTrue(all(row['dense_norm'] > 1.0 for row in rows))
        self.assertTrue(all(row['epsilon_norm'] > 1.0 for row in rows))
        for row in rows:
            self.assertAlmostEqual(row['epsilon_norm'], row['closed_form'], delta=1e-3)

    def test_rejects_small_n(self):
        with self.assertRaises(ConfigError):
            run_counterexample(2)


class ReconstructRunTests(ExperimentTestCase):

    def test_full_inpainting_unit_step_converges_to_denoised_observation(self):
        config = self.config(
            task=ForwardKind.INPAINTING, mu=1.0,
            solver=SolverConfig(Algorithm.PNP_ISTA, gamma=1.0), measure_contraction=False,
        )
        report, trajectory = run_reconstruct(config)
        self.assertEqual(report.iterations, 2)
        self.assertEqual(report.termination, 'converged')
        instance = build_instance(config, synthetic_image(8, 8))
        np.testing.assert_allclose(trajectory.final, instance.den.apply(instance.b), rtol=0, atol=1e-12)
        for name in ('reconstruction.pgm', 'guide.pgm', 'trajectory.csv', 'report.json'):
            self.assertTrue((self.out / name).exists(), name)
        self.assertEqual((read_pgm(self.out / 'reconstruction.pgm').width), 8)

    def test_report_carries_contraction_measurement(self):
        config = self.config(solver=SolverConfig(Algorithm.SC_PNP_ISTA, gamma=1.0))
        report, trajectory = run_reconstruct(config)
        self.assertIsNotNone(report.measured_factor)
        self.assertLess(report.measured_factor, 1.0)
        self.assertLessEqual(report.measured_factor, report.bound + 1e-9)
        self.assertTrue(report.contraction['holds'])
        self.assertGreater(report.final_psnr, 0.0)
        stored = json.loads((self.out / 'report.json').read_text())
        self.assertEqual(stored['algorithm'], 'sc_pnp_ista')
        self.assertEqual(stored['iterations'], trajectory.iterations)

    def test_without_outputs(self):
        config = self.config(measure_contraction=False, solver=SolverConfig(Algorithm.SC_PNP_ISTA, max_iters=5))
        report, _ = run_reconstruct(config, write_outputs=False)
        self.assertEqual(report.outputs, {})
        self.assertEqual(list(self.out.iterdir()), [])


class SweepTests(ExperimentTestCase):

    def test_points_vary_the_configured_axis(self):
        config = self.config(task=ForwardKind.INPAINTING, sweep=SweepGrid(mu=(0.2, 0.5)))
        points = sweep_points(config)
        self.assertEqual([p['parameter_value'] for p in points], [0.2, 0.5])
        self.assertTrue(all(p['parameter_name'] == 'mu' for p in points))
        self.assertTrue(all(p['stride'] is None for p in points))

    def test_parameter_axis_is_primary_when_nothing_varies(self):
        config = self.config(solver=SolverConfig(Algorithm.SC_PNP_ADMM, rho=2.0))
        points = sweep_points(config)
        self.assertEqual(len(points), 1)
        self.assertEqual((points[0]['parameter_name'], points[0]['parameter_value']), ('rho', 2.0))

    def test_single_point_matches_direct_measurement(self):
        config = self.config(solver=SolverConfig(Algorithm.SC_PNP_ISTA, gamma=0.5))
        result = run_sweep(config)
        self.assertEqual(len(result.rows), 1)
        instance = build_instance(config, synthetic_image(8, 8))
        direct = contraction_report(instance.model, instance.den, Algorithm.SC_PNP_ISTA, 0.5, GRID, strict=False)
        self.assertAlmostEqual(result.rows[0]['measured'], direct.measured, places=12)
        self.assertTrue(result.rows[0]['holds'])
        self.assertTrue((self.out / 'sweep.csv').exists())

    def test_measured_factor_does_not_grow_with_sampling_rate(self):
        config = self.config(
            task=ForwardKind.INPAINTING, guide='clean', power=TIGHT, threads=2,
            solver=SolverConfig(Algorithm.SC_PNP_ISTA, gamma=1.0),
            sweep=SweepGrid(mu=(0.2, 0.4, 0.6, 0.8, 1.0)),
        )
        measured = [row['measured'] for row in run_sweep(config).rows]
        self.assertEqual(len(measured), 5)
        for smaller_mu, larger_mu in zip(measured, measured[1:]):
            self.assertLessEqual(larger_mu, smaller_mu + 1e-6)

    def test_failing_point_raises_after_writing_table(self):
        def inflated(*args, **kwargs):
            return replace(contraction_report(*args, **kwargs), measured=1.5)

        config = self.config(sweep=SweepGrid(gamma=(0.5, 1.0)))
        with mock.patch('reconstruction.experiments.contraction_report', side_effect=inflated):
            with self.assertRaises(VerificationError) as ctx:
                run_sweep(config)
        self.assertEqual(len(ctx.exception.rows), 2)
        self.assertTrue((self.out / 'sweep.csv').exists())


class DenoiseRunTests(ExperimentTestCase):

    def test_denoising_improves_psnr(self):
        report = run_denoise(self.config(width=16, height=16, sigma=0.05))
        self.assertGreater(report.denoised_psnr, report.noisy_psnr)
        self.assertEqual(report.mode, 'plain')
        self.assertTrue((self.out / 'denoised.pgm').exists())
        self.assertTrue((self.out / 'noisy.pgm').exists())

    def test_noiseless_input(self):
        report = run_denoise(self.config(), write_outputs=False)
        self.assertIsNone(report.as_dict()['noisy_psnr'])


class VerifyRunTests(ExperimentTestCase):

    def test_plain_deblurring_passes(self):
        checks = run_verify(self.config())
        names = [check.check for check in checks]
        self.assertIn('eigen_deficit', names)
        self.assertIn('contraction_sc_pnp_admm', names)
        self.assertTrue(all(check.passed for check in checks))
        self.assertTrue((self.out / 'verify.csv').exists())

    def test_symmetrized_deblurring_passes(self):
        checks = run_verify(self.config(denoiser_mode=DenoiserMode.SYMMETRIZED))
        names = [check.check for check in checks]
        self.assertIn('contraction_pnp_ista', names)
        self.assertNotIn('eigen_deficit', names)
        self.assertTrue(all(check.passed for check in checks))


class ExecuteTests(ExperimentTestCase):

    def test_json_safe(self):
        value = {'a': np.float64(1.5), 'b': [float('inf'), np.int64(3)], 'c': (float('nan'),)}
        self.assertEqual(json_safe(value), {'a': 1.5, 'b': [None, 3], 'c': [None]})
        self.assertIsInstance(json_safe(np.int64(3)), int)

    def test_counterexample(self):
        report, rows = execute('counterexample', self.config(n_max=4))
        self.assertEqual(report, {'n_max': 4, 'rows': 2})
        self.assertEqual([row['n'] for row in rows], [3, 4])

    def test_unknown_kind(self):
        with self.assertRaises(ConfigError):
            execute('calibrate', self.config())
