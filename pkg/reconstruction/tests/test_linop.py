import math

import numpy as np
from django.test import SimpleTestCase, override_settings

from reconstruction.exceptions import ConfigError, DimensionMismatchError
from reconstruction.linop import (
    DiagonalWeights,
    LinearMap,
    VecImage,
    accurate_sum,
    adjoint_consistency,
    compose,
    compose_all,
    d_inner,
    d_norm,
    euclidean_norm,
    linear_combination,
    similarity_in_d_norm,
)


class DInnerTests(SimpleTestCase):

    def test_identity_weights_reduce_to_dot_product(self):
        D = DiagonalWeights.identity(2)
        self.assertEqual(d_inner([1.0, 0.0], [1.0, 0.0], D), 1.0)

    def test_weighted_constant_vector(self):
        D = DiagonalWeights([1.0, 2.0, 3.0])
        self.assertEqual(d_inner(np.ones(3), np.ones(3), D), 6.0)

    def test_zero_vector(self):
        D = DiagonalWeights([1.0, 2.0, 3.0])
        self.assertEqual(d_inner([0.3, -1.0, 2.0], np.zeros(3), D), 0.0)

    def test_symmetric_and_bilinear(self):
        rng = np.random.default_rng(1)
        D = DiagonalWeights(1.0 + rng.uniform(size=20))
        x, y, z = rng.standard_normal((3, 20))
        self.assertAlmostEqual(d_inner(x, y, D), d_inner(y, x, D), places=12)
        self.assertAlmostEqual(d_inner(2.0 * x + z, y, D), 2.0 * d_inner(x, y, D) + d_inner(z, y, D), places=10)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            d_inner(np.ones(3), np.ones(2), DiagonalWeights.identity(3))
        with self.assertRaises(DimensionMismatchError):
            d_norm(np.ones(4), DiagonalWeights.identity(3))


class DNormTests(SimpleTestCase):

    def test_example_value(self):
        self.assertAlmostEqual(d_norm([1.0, 1.0], DiagonalWeights([4.0, 4.0])), math.sqrt(8.0), places=14)

    def test_identity_is_euclidean(self):
        x = np.array([3.0, 4.0])
        self.assertEqual(d_norm(x, DiagonalWeights.identity(2)), 5.0)
        self.assertEqual(euclidean_norm(x), 5.0)

    def test_zero(self):
        self.assertEqual(d_norm(np.zeros(5), DiagonalWeights(np.full(5, 2.0))), 0.0)

    def test_dominates_euclidean_when_weights_at_least_one(self):
        rng = np.random.default_rng(2)
        D = DiagonalWeights(1.0 + 5.0 * rng.uniform(size=50))
        self.assertTrue(D.at_least_one())
        for _ in range(20):
            x = rng.standard_normal(50)
            self.assertGreaterEqual(d_norm(x, D), euclidean_norm(x))
            self.assertGreater(d_inner(x, x, D), 0.0)


class DiagonalWeightsTests(SimpleTestCase):

    def test_rejects_nonpositive_entries(self):
        with self.assertRaises(ConfigError):
            DiagonalWeights([1.0, 0.0])
        with self.assertRaises(ConfigError):
            DiagonalWeights([1.0, np.inf])

    def test_norm_is_largest_entry(self):
        self.assertEqual(DiagonalWeights([1.0, 7.5, 2.0]).norm, 7.5)
        self.assertTrue(DiagonalWeights.identity(4).is_identity)


class VecImageTests(SimpleTestCase):

    def test_grid_round_trip(self):
        grid = np.arange(6.0).reshape(2, 3)
        image = VecImage.from_grid(grid)
        self.assertEqual((image.width, image.height, image.n), (3, 2, 6))
        np.testing.assert_array_equal(image.grid, grid)

    def test_size_must_match_dimensions(self):
        with self.assertRaises(DimensionMismatchError):
            VecImage(np.zeros(5), width=2, height=3)

    def test_unit_range(self):
        self.assertTrue(VecImage.constant(2, 2, 0.5).in_unit_range())
        self.assertFalse(VecImage(np.array([0.0, 1.5]), 2, 1).in_unit_range())


class ComposeTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(3)
        self.M = rng.standard_normal((4, 4))
        self.N = rng.standard_normal((4, 4))

    def test_identity_composition(self):
        N = LinearMap.from_matrix(self.N)
        composed = compose(LinearMap.identity(4), N)
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = rng.standard_normal(4)
            np.testing.assert_allclose(composed.apply(x), N.apply(x), rtol=0, atol=1e-14)

    def test_matches_dense_product(self):
        composed = compose(LinearMap.from_matrix(self.M), LinearMap.from_matrix(self.N))
        np.testing.assert_allclose(composed.to_dense(), self.M @ self.N, rtol=0, atol=1e-12)

    def test_adjoint_is_reversed_transpose_product(self):
        composed = compose(LinearMap.from_matrix(self.M), LinearMap.from_matrix(self.N))
        np.testing.assert_allclose(composed.T.to_dense(), self.N.T @ self.M.T, rtol=0, atol=1e-12)

    def test_compose_all_order(self):
        A, B, C = (LinearMap.from_matrix(m) for m in (self.M, self.N, self.M.T))
        np.testing.assert_allclose(compose_all(A, B, C).to_dense(), self.M @ self.N @ self.M.T, atol=1e-12)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            compose(LinearMap.from_matrix(np.ones((3, 4))), LinearMap.from_matrix(np.ones((3, 2))))

    def test_apply_checks_dimension(self):
        with self.assertRaises(DimensionMismatchError):
            LinearMap.from_matrix(self.M).apply(np.ones(3))


class CombinatorTests(SimpleTestCase):

    def test_linear_combination(self):
        rng = np.random.default_rng(5)
        M, N = rng.standard_normal((2, 5, 5))
        combo = linear_combination([(2.0, LinearMap.from_matrix(M)), (-0.5, LinearMap.from_matrix(N))])
        np.testing.assert_allclose(combo.to_dense(), 2.0 * M - 0.5 * N, atol=1e-12)
        np.testing.assert_allclose(combo.T.to_dense(), (2.0 * M - 0.5 * N).T, atol=1e-12)

    def test_similarity_in_d_norm(self):
        rng = np.random.default_rng(6)
        M = rng.standard_normal((6, 6))
        d = 1.0 + rng.uniform(size=6)
        S = similarity_in_d_norm(LinearMap.from_matrix(M), DiagonalWeights(d))
        expected = np.diag(np.sqrt(d)) @ M @ np.diag(1.0 / np.sqrt(d))
        np.testing.assert_allclose(S.to_dense(), expected, atol=1e-12)

    def test_zero_map(self):
        np.testing.assert_array_equal(LinearMap.zero(3, 2).apply(np.ones(3)), np.zeros(2))

    def test_to_dense_limit(self):
        with self.assertRaises(ConfigError):
            LinearMap.identity(10).to_dense(limit=5)

    @override_settings(PNP_DENSE_LIMIT=5)
    def test_to_dense_limit_comes_from_settings(self):
        with self.assertRaises(ConfigError):
            LinearMap.identity(10).to_dense()
        self.assertEqual(LinearMap.identity(5).to_dense().shape, (5, 5))
        self.assertEqual(LinearMap.identity(10).to_dense(limit=10).shape, (10, 10))


class AdjointConsistencyTests(SimpleTestCase):

    def test_consistent_map_passes(self):
        rng = np.random.default_rng(7)
        M = LinearMap.from_matrix(rng.standard_normal((7, 5)))
        check = adjoint_consistency(M, trials=100, norm_estimate=5.0, rng=rng)
        self.assertTrue(check.passed)
        self.assertEqual(check.trials, 100)

    def test_wrong_adjoint_is_caught(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((5, 5))
        broken = LinearMap(5, 5, lambda x: A @ x, lambda y: A @ y, name='broken')
        check = adjoint_consistency(broken, trials=20, rng=rng)
        self.assertFalse(check.passed)
        self.assertGreater(check.failures, 0)


class AccurateSumTests(SimpleTestCase):

    def test_large_sums_are_exactly_rounded(self):
        values = np.full(200_000, 0.1)
        self.assertEqual(accurate_sum(values), math.fsum(values))

    def test_small_sums(self):
        self.assertEqual(accurate_sum(np.array([1.0, 2.0, 3.0])), 6.0)
