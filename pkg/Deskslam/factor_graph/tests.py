import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from Deskslam.exceptions import ConfigurationError, ContainerFormatError, DomainError, ShapeMismatchError
from geom.lie import exp_map, left_update, relative_pose
from geom.models import Intrinsics
from simworld.dataset import build_frontend, ground_truth_graph
from simworld.models import NoiseSpec
from solver.gauss_newton import gauss_newton
from solver.linalg import assemble

from .io import dump_graph, load_graph, read_grid, write_grid
from .models import KeyframeGraph, KeyframeState, ReprojectionEdge, ScaleGrid
from .problems import BundleAdjustment, DepthScaleAlignment, RelativePoseFit, full_bundle_adjustment
from .residuals import bilinear_scale, bilinear_weights, depth_prior_residual, grid_field, reprojection_residual

TINY = Intrinsics.default(32, 24, 28.0)
SMALL = Intrinsics.default(80, 60, 69.0)


def clean_graph(n=4, K=SMALL, kind='loop', length=24, span=2):
    frontend = build_frontend('room', kind, length, K, NoiseSpec.clean(), seed=0, graph_stride=4)
    return ground_truth_graph(frontend, range(n), span), frontend


def central_difference(f, x0, eps):
    cols = []
    for k in range(x0.size):
        step = np.zeros_like(x0)
        step[k] = eps
        cols.append((f(x0 + step) - f(x0 - step)) / (2 * eps))
    return np.stack(cols, axis=-1)


class BilinearTests(unittest.TestCase):

    def test_unit_grid(self):
        field = grid_field(ScaleGrid.ones(2, 2), (15, 20))
        assert_allclose(field, 1.0, rtol=1e-15)

    def test_corner_anchored_interpolation(self):
        grid = ScaleGrid([[1.0, 2.0], [3.0, 4.0]])
        self.assertAlmostEqual(bilinear_scale([20.0, 15.0], grid, (41, 31)), 2.5, places=12)
        self.assertAlmostEqual(bilinear_scale([0.0, 0.0], grid, (41, 31)), 1.0, places=12)
        self.assertAlmostEqual(bilinear_scale([40.0, 30.0], grid, (41, 31)), 4.0, places=12)
        self.assertAlmostEqual(bilinear_scale([40.0, 0.0], grid, (41, 31)), 2.0, places=12)

    def test_three_by_three_grid_hits_nodes(self):
        coefficients = np.arange(1.0, 10.0).reshape(3, 3)
        field = grid_field(ScaleGrid(coefficients), (21, 31))
        self.assertAlmostEqual(field[10, 15], 5.0, places=12)
        self.assertAlmostEqual(field[20, 0], 7.0, places=12)

    def test_weights_form_a_partition_of_unity(self):
        pixels = np.random.default_rng(0).uniform([0, 0], [39, 29], size=(100, 2))
        _, w = bilinear_weights(pixels, (3, 4), (40, 30))
        assert_allclose(w.sum(axis=1), 1.0, rtol=1e-14)
        self.assertTrue(np.all(w >= 0))

    def test_pixel_outside_the_image(self):
        with self.assertRaises(DomainError):
            bilinear_weights([[40.5, 3.0]], (2, 2), (40, 30))

    def test_grid_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            ScaleGrid([[1.0, 0.0], [1.0, 1.0]])


class ReprojectionResidualTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.graph, cls.frontend = clean_graph()

    def test_ground_truth_has_zero_objective(self):
        for edge in self.graph.edges:
            self.assertLess(reprojection_residual(edge, self.graph, jacobians=False).objective(), 1e-16)

    def _residuals(self, edge, kf_id, pose=None, inv_depth=None):
        kf = self.graph.keyframe(kf_id)
        saved = kf.pose, kf.inv_depth
        try:
            if pose is not None:
                kf.pose = pose
            if inv_depth is not None:
                kf.inv_depth = inv_depth
            return reprojection_residual(edge, self.graph, jacobians=False).residuals
        finally:
            kf.pose, kf.inv_depth = saved

    def test_pose_jacobians_match_finite_differences(self):
        edge = self.graph.find_edge(1, 2)
        terms = reprojection_residual(edge, self.graph)
        for kf_id, analytic in ((edge.src, terms.J_src), (edge.dst, terms.J_dst)):
            pose = self.graph.keyframe(kf_id).pose
            numeric = central_difference(lambda d: self._residuals(edge, kf_id, pose=left_update(pose, d)),
                                         np.zeros(6), 1e-6)
            assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-5)

    def test_depth_jacobian_matches_finite_differences(self):
        edge = self.graph.find_edge(2, 1)
        terms = reprojection_residual(edge, self.graph)
        inv_depth = self.graph.keyframe(2).inv_depth
        eps = 1e-7
        plus = self._residuals(edge, 2, inv_depth=inv_depth + eps)
        minus = self._residuals(edge, 2, inv_depth=inv_depth - eps)
        assert_allclose(terms.J_depth, (plus - minus) / (2 * eps), rtol=1e-3, atol=1e-5)

    def test_zero_confidence_pixels_do_not_contribute(self):
        edge = self.graph.find_edge(0, 1)
        masked = ReprojectionEdge(0, 1, edge.targets.copy(), edge.confidences.copy())
        masked.confidences[:3] = 0.0
        masked.targets[:3] += 50.0
        reference = ReprojectionEdge(0, 1, edge.targets, masked.confidences)
        self.assertEqual(reprojection_residual(masked, self.graph, jacobians=False).objective(),
                         reprojection_residual(reference, self.graph, jacobians=False).objective())

    def test_pixels_behind_the_target_get_no_weight(self):
        edge = self.graph.find_edge(0, 1)
        graph = KeyframeGraph(SMALL, keyframes=[self.graph.keyframe(0), self.graph.keyframe(1)])
        saved = graph.keyframe(1).pose
        try:
            graph.keyframe(1).pose = exp_map([0, 0, 0, 0, np.pi - 0.1, 0]).compose(saved)
            terms = reprojection_residual(edge, graph)
            behind = terms.weights[:, 0] == 0
            self.assertTrue(np.any(behind))
            assert_array_equal(terms.residuals[behind], 0.0)
            assert_array_equal(terms.J_dst[behind], 0.0)
        finally:
            graph.keyframe(1).pose = saved


class DepthPriorResidualTests(unittest.TestCase):

    def keyframe(self, prior_scale=1.0):
        inv_depth = np.random.default_rng(1).uniform(0.2, 1.0, size=(15, 20))
        return KeyframeState(0, exp_map(np.zeros(6)), inv_depth, prior_scale / inv_depth)

    def test_consistent_prior_has_zero_residual(self):
        terms = depth_prior_residual(self.keyframe())
        assert_allclose(terms.residuals, 0.0, atol=1e-15)

    def test_doubled_depth_prior_needs_half_scale(self):
        kf = self.keyframe(prior_scale=2.0)
        assert_allclose(depth_prior_residual(kf).residuals, -0.5 * kf.inv_depth.reshape(-1), rtol=1e-12)
        kf.scale_grid = ScaleGrid(np.full((2, 2), 0.5))
        assert_allclose(depth_prior_residual(kf).residuals, 0.0, atol=1e-14)

    def test_single_cell_fit_recovers_half(self):
        kf = self.keyframe(prior_scale=2.0)
        prior_inv = kf.prior_inv_depth.reshape(-1)
        d = kf.inv_depth.reshape(-1)
        # the residual is linear in 1/b for a constant grid
        b = np.sum(prior_inv ** 2) / np.sum(prior_inv * d)
        self.assertAlmostEqual(b, 0.5, places=12)

    def test_grid_jacobian_matches_finite_differences(self):
        kf = self.keyframe(prior_scale=1.3)
        base = np.array([0.9, 1.1, 1.2, 0.8])
        kf.scale_grid = ScaleGrid(base.reshape(2, 2))
        J = depth_prior_residual(kf).J_grid

        def residuals(c):
            kf.scale_grid = ScaleGrid(c.reshape(2, 2))
            return depth_prior_residual(kf).residuals

        assert_allclose(J, central_difference(residuals, base, 1e-6), rtol=1e-5, atol=1e-9)

    def test_grid_divides_prior_inverse_depth(self):
        kf = self.keyframe()
        kf.scale_grid = ScaleGrid(np.full((2, 2), 4.0))
        assert_allclose(depth_prior_residual(kf).residuals, -0.75 * kf.inv_depth.reshape(-1), rtol=1e-12)

    def test_aligned_prior_depth(self):
        kf = self.keyframe(prior_scale=2.0)
        kf.scale_grid = ScaleGrid(np.full((2, 2), 0.5))
        assert_allclose(kf.aligned_prior_depth(), kf.depth, rtol=1e-14)

    def test_prior_only_system_has_diagonal_weighted_depth_block(self):
        graph = KeyframeGraph(Intrinsics.default(20, 15, 18.0), keyframes=[self.keyframe(prior_scale=1.5)])
        problem = DepthScaleAlignment(graph, [0], [], prior_weight=2.0)
        system = assemble(problem.linearize(), problem.n_primary, problem.n_depth)
        assert_allclose(system.C, 2.0)
        J_grid = depth_prior_residual(graph.keyframe(0)).J_grid
        assert_allclose(system.E.toarray(), -2.0 * J_grid.T, rtol=1e-14)


class GraphTests(unittest.TestCase):

    def setUp(self):
        self.graph, self.frontend = clean_graph(n=4, K=TINY, span=1)

    def test_keyframe_ids_must_increase(self):
        with self.assertRaises(ConfigurationError):
            self.graph.add_keyframe(self.frontend.gt_keyframe(2))

    def test_edges_need_both_endpoints(self):
        edge = self.graph.edges[0]
        with self.assertRaises(ConfigurationError):
            self.graph.add_edge(ReprojectionEdge(0, 9, edge.targets, edge.confidences))

    def test_edge_grid_must_match(self):
        with self.assertRaises(ShapeMismatchError):
            self.graph.add_edge(ReprojectionEdge(0, 1, np.zeros((3, 3, 2)), np.ones((3, 3, 2))))

    def test_self_edges_are_rejected(self):
        edge = self.graph.edges[0]
        with self.assertRaises(ConfigurationError):
            ReprojectionEdge(1, 1, edge.targets, edge.confidences)

    def test_active_edge_is_replaced(self):
        before = len(self.graph.edges)
        edge = self.graph.find_edge(0, 1)
        self.graph.add_edge(ReprojectionEdge(0, 1, edge.targets, edge.confidences))
        self.assertEqual(len(self.graph.edges), before)

    def test_retired_edges_are_kept(self):
        self.graph.window_size = 2
        before = len(self.graph.edges)
        retired = self.graph.retire_edges()
        self.assertEqual(len(self.graph.edges), before)
        self.assertEqual(retired, 4)
        self.assertEqual({e.key for e in self.graph.active_edges()}, {(2, 3), (3, 2)})
        self.assertEqual(len(self.graph.inactive_edges()), 4)

    def test_mean_depth(self):
        expected = np.mean([self.frontend.gt(k).depth.mean() for k in range(4)])
        self.assertAlmostEqual(self.graph.mean_depth(), expected, places=12)


class ContainerTests(unittest.TestCase):

    def setUp(self):
        self.graph, _ = clean_graph(n=3, K=TINY, span=1)
        self.graph.keyframe(0).is_pose_fixed = True
        self.graph.edges[-1].active = False

    def test_round_trip(self):
        loaded = load_graph(dump_graph(self.graph))
        self.assertEqual(loaded.ids, self.graph.ids)
        self.assertEqual(loaded.K, self.graph.K)
        self.assertTrue(loaded.keyframe(0).is_pose_fixed)
        for a, b in zip(loaded.keyframes, self.graph.keyframes):
            assert_array_equal(a.inv_depth, b.inv_depth)
            assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-15)
        self.assertEqual([(e.key, e.active, e.loop) for e in loaded.edges],
                         [(e.key, e.active, e.loop) for e in self.graph.edges])
        assert_array_equal(loaded.edges[0].targets, self.graph.edges[0].targets)

    def test_bad_magic(self):
        payload = b'KFG2' + dump_graph(self.graph)[4:]
        with self.assertRaises(ContainerFormatError):
            load_graph(payload)

    def test_truncated_payload(self):
        with self.assertRaises(ContainerFormatError):
            load_graph(dump_graph(self.graph)[:-8])

    def test_trailing_bytes(self):
        with self.assertRaises(ContainerFormatError):
            load_graph(dump_graph(self.graph) + b'\0')

    def test_depth_grid_file(self):
        values = np.random.default_rng(0).uniform(0.5, 4.0, size=(6, 8))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'kf_0_depth.f32'
            write_grid(path, values)
            self.assertEqual(path.stat().st_size, 16 + 4 * 48)
            assert_allclose(read_grid(path), values, rtol=1e-7)
            path.write_bytes(path.read_bytes()[:-4])
            with self.assertRaises(ContainerFormatError):
                read_grid(path)


class BundleAdjustmentTests(unittest.TestCase):

    def test_hessian_matches_finite_difference_jacobian(self):
        graph, _ = clean_graph(n=3, K=TINY, span=2)
        problem = BundleAdjustment(graph, graph.ids, graph.ids, graph.edges)
        H, _ = assemble(problem.linearize(), problem.n_primary, problem.n_depth).dense()
        weights = np.concatenate([reprojection_residual(e, graph, jacobians=False).weights.ravel()
                                  for e in graph.edges])

        def stacked(x):
            state = problem.snapshot()
            problem.retract(x[:problem.n_primary], x[problem.n_primary:])
            r = np.concatenate([reprojection_residual(e, graph, jacobians=False).residuals.ravel()
                                for e in graph.edges])
            problem.restore(state)
            return r

        J = central_difference(stacked, np.zeros(problem.n_primary + problem.n_depth), 1e-7)
        expected = J.T @ (weights[:, None] * J)
        assert_allclose(H, expected, rtol=1e-3, atol=1e-5 * np.abs(expected).max())

    def test_recovers_perturbed_states(self):
        graph, frontend = clean_graph(n=5, span=2)
        for kf in graph.keyframes[:2]:
            kf.is_pose_fixed = True
        rng = np.random.default_rng(3)
        for kf in graph.keyframes[2:]:
            kf.pose = left_update(kf.pose, rng.normal(scale=0.01, size=6))
        for kf in graph.keyframes:
            kf.inv_depth = kf.inv_depth * rng.uniform(0.98, 1.02, size=kf.shape)
        problem = BundleAdjustment(graph, graph.ids, graph.ids, graph.edges)
        report = gauss_newton(problem, max_iters=40)
        self.assertTrue(report.converged)
        self.assertFalse(report.diverged)
        self.assertLess(report.final_objective, 1e-10)
        for kf in graph.keyframes:
            assert_allclose(kf.pose.matrix(), frontend.trajectory.gt[kf.id].matrix(), atol=1e-5)

    def test_gauge_is_fixed_by_two_poses(self):
        graph, _ = clean_graph(n=4, span=2)
        free = BundleAdjustment(graph, graph.ids, graph.ids, graph.edges).reduced_hessian()
        eig = np.linalg.eigvalsh(0.5 * (free + free.T))
        self.assertLess(eig[0], 1e-10 * eig[-1])
        for kf in graph.keyframes[:2]:
            kf.is_pose_fixed = True
        fixed = BundleAdjustment(graph, graph.ids, graph.ids, graph.edges).reduced_hessian()
        eig = np.linalg.eigvalsh(0.5 * (fixed + fixed.T))
        self.assertGreater(eig[0], 1e-8 * eig[-1])

    def test_window_leaves_other_states_alone(self):
        graph, _ = clean_graph(n=5, span=2)
        graph.keyframe(4).inv_depth = graph.keyframe(4).inv_depth * 1.05
        before = {kf.id: (kf.pose.matrix(), kf.inv_depth.copy()) for kf in graph.keyframes}
        edges = [e for e in graph.edges if e.src >= 3 and e.dst >= 3]
        gauss_newton(BundleAdjustment(graph, [4], [3, 4], edges), max_iters=3)
        for kf_id in (0, 1, 2):
            assert_array_equal(graph.keyframe(kf_id).pose.matrix(), before[kf_id][0])
            assert_array_equal(graph.keyframe(kf_id).inv_depth, before[kf_id][1])
        assert_array_equal(graph.keyframe(3).pose.matrix(), before[3][0])

    def test_full_ba_on_exact_data(self):
        graph, _ = clean_graph(n=4, K=TINY, span=3)
        report = full_bundle_adjustment(graph, max_iters=3)
        self.assertTrue(report.converged)
        self.assertLess(report.final_objective, 1e-16)


class DepthScaleAlignmentTests(unittest.TestCase):

    def test_consistent_priors_are_a_fixed_point(self):
        graph, _ = clean_graph(n=3, K=TINY, span=2)
        before = [kf.inv_depth.copy() for kf in graph.keyframes]
        report = gauss_newton(DepthScaleAlignment(graph, graph.ids, graph.edges))
        self.assertTrue(report.converged)
        self.assertEqual(report.accepted, 0)
        for kf, inv_depth in zip(graph.keyframes, before):
            assert_allclose(kf.inv_depth, inv_depth, rtol=1e-12)
            assert_allclose(kf.scale_grid.coefficients, 1.0, rtol=1e-12)

    def test_planted_field_is_recovered(self):
        K = Intrinsics.default(160, 120, 138.5)
        noise = NoiseSpec(flow_sigma=0.5, prior_noise_sigma=0.0)
        frontend = build_frontend('room', 'loop', 24, K, noise, seed=11, graph_stride=2)
        graph = ground_truth_graph(frontend, range(6), span=3)
        problem = DepthScaleAlignment(graph, graph.ids, graph.edges)
        report = gauss_newton(problem, max_iters=20)
        self.assertFalse(report.diverged)
        for kf in graph.keyframes:
            planted = frontend.prior(kf.id)[1]
            assert_allclose(kf.scale_grid.coefficients, planted, rtol=1e-2)
            gt = frontend.gt(kf.id).depth
            prior = kf.prior_depth
            single = prior * np.median(gt / prior)
            grid_rel = np.mean(np.abs(kf.aligned_prior_depth() - gt) / gt)
            single_rel = np.mean(np.abs(single - gt) / gt)
            self.assertLess(2.0 * grid_rel, single_rel)


class RelativePoseFitTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.graph, cls.frontend = clean_graph(n=3, span=2)

    def fit(self, scale=1.0, sim3=False):
        src, dst = self.graph.keyframe(0), self.graph.keyframe(1)
        edge = self.graph.find_edge(0, 1)
        edge = ReprojectionEdge(0, 1, edge.targets, scale * edge.confidences)
        reverse = self.graph.find_edge(1, 0) if sim3 else None
        start = left_update(relative_pose(src.pose, dst.pose), np.full(6, 0.01))
        fit = RelativePoseFit(self.graph.K, edge, src.inv_depth, start, reverse, dst.inv_depth)
        gauss_newton(fit, max_iters=30)
        return fit

    def test_exact_edge_gives_ground_truth(self):
        truth = relative_pose(self.graph.keyframe(0).pose, self.graph.keyframe(1).pose)
        for sim3 in (False, True):
            fit = self.fit(sim3=sim3)
            assert_allclose(fit.pose.matrix(), truth.matrix(), atol=1e-8)
            self.assertLess(fit.normal_matrix()[1], 1e-10)
        self.assertEqual(fit.n_primary, 7)

    def test_uniform_confidence_scaling_keeps_the_argmin(self):
        a, b = self.fit(), self.fit(scale=2.0)
        assert_allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-8)
