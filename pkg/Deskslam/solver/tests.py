import unittest

import numpy as np
import scipy.sparse as sp
from numpy.testing import assert_allclose

from Deskslam.exceptions import ConfigurationError, DegenerateProblemError, RankDeficiencyError

from .gauss_newton import gauss_newton
from .linalg import assemble, damp, reduced_hessian, schur_solve
from .models import BlockSystem, DampingConfig, FactorBlock


def random_blocks(rng, n_primary, n_depth):
    """One observation per depth variable, two weighted rows each."""
    return [FactorBlock(
        cols=np.arange(n_primary),
        residuals=rng.normal(size=(n_depth, 2)),
        weights=rng.uniform(0.5, 2.0, size=(n_depth, 2)),
        J_primary=rng.normal(size=(n_depth, 2, n_primary)),
        depth_cols=np.arange(n_depth),
        J_depth=rng.normal(size=(n_depth, 2)),
    )]


class LinearProblem:
    """r = A x - b with diagonal weights; x is the primary block."""

    def __init__(self, A, b, weights=1.0):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.weights = np.broadcast_to(weights, self.b.shape)
        self.x = np.zeros(self.A.shape[1])
        self.n_primary = self.A.shape[1]
        self.n_depth = 0

    def residuals(self):
        return self.A @ self.x - self.b

    def objective(self):
        return float(np.sum(self.weights * self.residuals() ** 2))

    def linearize(self):
        return [FactorBlock(np.arange(self.n_primary), self.residuals(), self.weights, self.A[:, None, :])]

    def snapshot(self):
        return self.x.copy()

    def restore(self, state):
        self.x = state

    def retract(self, dp, dd):
        self.x = self.x + dp


class WorseningProblem(LinearProblem):
    """Reports a higher objective after every move."""

    def objective(self):
        return super().objective() + 100.0 * float(np.any(self.x != 0))


class SchurTests(unittest.TestCase):

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n_primary = int(rng.integers(1, 29))
            n_depth = int(rng.integers(n_primary + 5, 501))
            system = assemble(random_blocks(rng, n_primary, n_depth), n_primary, n_depth)
            H, g = system.dense()
            expected = np.linalg.solve(H, g)
            dp, dd = schur_solve(system)
            x = np.concatenate([dp, dd])
            self.assertLess(np.linalg.norm(x - expected), 1e-8 * np.linalg.norm(expected))

    def test_uncoupled_blocks(self):
        rng = np.random.default_rng(0)
        primary = FactorBlock(np.arange(3), rng.normal(size=(6, 1)), 1.0, rng.normal(size=(6, 1, 3)))
        depth = FactorBlock(np.zeros(0), rng.normal(size=(4, 1)), 2.0, np.zeros((4, 1, 0)),
                            depth_cols=np.arange(4), J_depth=np.full((4, 1), 0.5))
        system = assemble([primary, depth], 3, 4)
        self.assertEqual(system.E.nnz, 0)
        dp, dd = schur_solve(system)
        assert_allclose(dp, np.linalg.solve(system.B, system.v), rtol=1e-12)
        assert_allclose(dd, system.w / system.C, rtol=1e-12)

    def test_solution_is_linear_in_the_right_hand_side(self):
        system = assemble(random_blocks(np.random.default_rng(5), 6, 40), 6, 40)
        dp, dd = schur_solve(system)
        scaled = BlockSystem(system.B, system.E, system.C, 3.0 * system.v, 3.0 * system.w)
        dp3, dd3 = schur_solve(scaled)
        assert_allclose(dp3, 3.0 * dp, rtol=1e-10)
        assert_allclose(dd3, 3.0 * dd, rtol=1e-10)

    def test_reduced_hessian_matches_dense_schur_complement(self):
        system = assemble(random_blocks(np.random.default_rng(6), 5, 30), 5, 30)
        H, _ = system.dense()
        S = H[:5, :5] - H[:5, 5:] @ np.linalg.inv(H[5:, 5:]) @ H[5:, :5]
        assert_allclose(reduced_hessian(system), S, rtol=1e-9, atol=1e-9)

    def test_rank_deficient_system(self):
        system = BlockSystem(np.zeros((2, 2)), sp.csr_matrix((2, 3)), np.ones(3), np.ones(2), np.ones(3))
        with self.assertRaises(RankDeficiencyError) as ctx:
            schur_solve(system)
        self.assertLessEqual(ctx.exception.min_eigenvalue, 0.0)

    def test_nothing_to_assemble(self):
        with self.assertRaises(DegenerateProblemError):
            assemble([], 3, 0)
        empty = FactorBlock(np.arange(3), np.zeros((0, 2)), 1.0, np.zeros((0, 2, 3)))
        with self.assertRaises(DegenerateProblemError):
            assemble([empty], 3, 0)


class DampingTests(unittest.TestCase):

    def setUp(self):
        self.system = assemble(random_blocks(np.random.default_rng(9), 4, 20), 4, 20)

    def test_no_damping_is_identity(self):
        damped = damp(self.system, DampingConfig(0.0, 0.0))
        assert_allclose(damped.B, self.system.B, rtol=0)
        assert_allclose(damped.C, self.system.C, rtol=0)
        assert_allclose(damped.E.toarray(), self.system.E.toarray(), rtol=0)

    def test_default_damping(self):
        damped = damp(self.system, DampingConfig())
        assert_allclose(damped.C, 1.1 * self.system.C + 1e-4, rtol=1e-15)
        assert_allclose(damped.B, 1.1 * self.system.B + 1e-4 * np.eye(4), rtol=1e-15)
        assert_allclose(damped.E.toarray(), 1.1 * self.system.E.toarray(), rtol=1e-15)
        assert_allclose(damped.v, self.system.v)

    def test_negative_damping_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            DampingConfig(epsilon=-1.0)


class GaussNewtonTests(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(4)
        self.A = rng.normal(size=(12, 3))
        self.b = rng.normal(size=12)

    def test_linear_problem_takes_one_step(self):
        problem = LinearProblem(self.A, self.b)
        report = gauss_newton(problem, max_iters=10, cfg=DampingConfig(0.0, 0.0))
        self.assertTrue(report.converged)
        self.assertEqual(report.accepted, 1)
        expected, *_ = np.linalg.lstsq(self.A, self.b, rcond=None)
        assert_allclose(problem.x, expected, rtol=1e-10)

    def test_damped_steps_still_descend(self):
        problem = LinearProblem(self.A, self.b)
        report = gauss_newton(problem, max_iters=50)
        self.assertTrue(all(a >= b for a, b in zip(report.objectives, report.objectives[1:])))
        expected, *_ = np.linalg.lstsq(self.A, self.b, rcond=None)
        assert_allclose(problem.x, expected, atol=1e-4)

    def test_zero_residual_converges_immediately(self):
        problem = LinearProblem(self.A, np.zeros(12))
        report = gauss_newton(problem)
        self.assertTrue(report.converged)
        self.assertEqual(report.iterations, 1)
        self.assertEqual(report.accepted, 0)
        self.assertEqual(report.final_objective, 0.0)

    def test_rising_objective_is_rolled_back(self):
        problem = WorseningProblem(self.A, self.b)
        report = gauss_newton(problem, max_iters=10, max_retries=3)
        self.assertTrue(report.diverged)
        self.assertFalse(report.converged)
        self.assertEqual(report.accepted, 0)
        self.assertEqual(report.iterations, 3)
        assert_allclose(problem.x, 0.0)
        self.assertAlmostEqual(report.final_damping, 1e-1, places=12)

    def test_zero_iterations(self):
        problem = LinearProblem(self.A, self.b)
        report = gauss_newton(problem, max_iters=0)
        self.assertEqual(report.iterations, 0)
        self.assertEqual(report.objectives, [problem.objective()])

    def test_iteration_log_line(self):
        with self.assertLogs('solver.gauss_newton', level='DEBUG') as logs:
            gauss_newton(LinearProblem(self.A, self.b), max_iters=2)
        self.assertRegex(logs.output[0], r'iter=1 obj=\S+ step_inf=\S+ damping=\S+')

    def test_report_as_dict(self):
        report = gauss_newton(LinearProblem(self.A, self.b), max_iters=2)
        self.assertEqual(set(report.as_dict()), {'converged', 'diverged', 'iterations', 'accepted',
                                                 'initial_objective', 'final_objective'})
