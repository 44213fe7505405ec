import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import ConfigurationError, DegenerateProblemError, DistillationError, DomainError
from factor_graph.models import KeyframeGraph, ReprojectionEdge
from factor_graph.residuals import reprojection_residual
from geom.lie import relative_pose
from geom.models import Intrinsics, SE3Pose, Sim3Pose
from metrics.evaluation import ate
from simworld.dataset import build_frontend, ground_truth_graph, local_edges
from simworld.models import NoiseSpec

from .detection import detect_loops, loop_edges
from .distill import distill_graph, distill_relative_pose
from .models import COVARIANCE_FLOOR, LoopCandidate, LoopThresholds, RelPoseFactor
from .pgba import lift_to_sim3, lower_to_se3, pgba

K = Intrinsics.default(64, 48, 55.0)
N = 50
DRIFT = NoiseSpec(flow_sigma=0.5, prior_noise_sigma=0.0, scale_drift_rate=1.01, yaw_drift=0.004)


def loop_frontend(noise=None, seed=0, n=N):
    return build_frontend('room', 'loop', n, K, noise or NoiseSpec.clean(), seed, graph_stride=2)


def anchored_graph(frontend, poses, inv_depths, span=2):
    graph = KeyframeGraph(frontend.K, 8)
    ids = range(len(poses))
    for k in ids:
        graph.add_keyframe(frontend.keyframe(k, poses[k], inv_depths[k]))
    for kf in graph.keyframes[:2]:
        kf.is_pose_fixed = True
    for edge in local_edges(frontend, ids, span):
        edge.active = False
        graph.add_edge(edge)
    last = len(poses) - 1
    for edge in loop_edges(frontend, [LoopCandidate(0, last, 0.0, 0.0), LoopCandidate(1, last, 0.0, 0.0)]):
        graph.add_edge(edge)
    return graph


def gt_graph(frontend):
    traj = frontend.trajectory
    return anchored_graph(frontend, traj.gt, [1.0 / frontend.gt(k).depth for k in range(len(frontend))])


def drifted_graph(frontend):
    traj = frontend.trajectory
    inv_depths = [1.0 / (frontend.gt(k).depth * traj.drift_scales[k]) for k in range(len(frontend))]
    return anchored_graph(frontend, traj.drifted, inv_depths)


def as_dict(graph):
    return dict(zip(graph.ids, graph.poses()))


class LoopThresholdTests(unittest.TestCase):

    def test_thresholds_must_be_positive(self):
        for kwargs in ({'tau_flow': 0.0}, {'tau_ori': -1.0}, {'tau_temp': 0}):
            with self.assertRaises(ConfigurationError):
                LoopThresholds(**kwargs)


class DetectLoopsTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.frontend = loop_frontend()
        cls.keyframes = [cls.frontend.gt_keyframe(k) for k in range(N)]

    def detect(self, thresholds=None, flow_fn=None):
        return detect_loops(self.keyframes[-1], self.keyframes[:-1], flow_fn or self.frontend.mean_flow,
                            thresholds or LoopThresholds())

    def test_loop_is_found_at_the_revisit(self):
        candidates = self.detect()
        pairs = [(c.i, c.j) for c in candidates]
        self.assertIn((0, N - 1), pairs)
        for c in candidates:
            self.assertGreater(N - 1 - c.i, LoopThresholds().tau_temp)
            self.assertLess(c.d_of, LoopThresholds().tau_flow)
            self.assertLess(c.dori, LoopThresholds().tau_ori)

    def test_temporal_gap_longer_than_history(self):
        self.assertEqual(self.detect(LoopThresholds(tau_temp=N)), [])

    def test_opposite_view_is_rejected(self):
        old = self.keyframes[0]
        turn = SE3Pose.from_rt(Rotation.from_euler('y', np.pi).as_matrix(), np.zeros(3))
        flipped = self.frontend.keyframe(N - 1, turn.compose(old.pose), old.inv_depth)
        thresholds = LoopThresholds(tau_ori=np.radians(30.0))
        always_close = lambda i, j: 0.0  # noqa: E731
        self.assertEqual(detect_loops(flipped, self.keyframes[:-1], always_close, thresholds), [])
        same = self.frontend.keyframe(N - 1, old.pose, old.inv_depth)
        found = detect_loops(same, self.keyframes[:-1], always_close, thresholds)
        self.assertIn(0, [c.i for c in found])

    def test_loop_is_logged(self):
        with self.assertLogs('loops.detection', 'INFO') as logs:
            self.detect()
        self.assertTrue(any(f"LOOP i=0 j={N - 1} d_of=" in line for line in logs.output))

    def test_detection_is_pure(self):
        self.assertEqual(self.detect(), self.detect())

    def test_loop_edges_go_both_ways(self):
        edges = loop_edges(self.frontend, [LoopCandidate(0, N - 1, 1.0, 0.01)])
        self.assertEqual([e.key for e in edges], [(N - 1, 0), (0, N - 1)])
        self.assertTrue(all(e.loop and not e.active for e in edges))


class RelPoseFactorTests(unittest.TestCase):

    def test_shape_is_checked(self):
        with self.assertRaises(ConfigurationError):
            RelPoseFactor(0, 1, Sim3Pose(), np.eye(6))

    def test_covariance_must_be_symmetric(self):
        cov = np.eye(7)
        cov[0, 1] = 0.5
        with self.assertRaises(DomainError):
            RelPoseFactor(0, 1, Sim3Pose(), cov)

    def test_covariance_must_be_psd(self):
        with self.assertRaises(DomainError):
            RelPoseFactor(0, 1, Sim3Pose(), np.diag([1.0, 1, 1, 1, 1, 1, -0.1]))

    def test_information_is_floored(self):
        factor = RelPoseFactor(0, 1, Sim3Pose(), np.zeros((7, 7)))
        assert_allclose(factor.information, np.eye(7) / COVARIANCE_FLOOR)
        U = RelPoseFactor(0, 1, Sim3Pose(), np.diag(np.arange(1.0, 8.0))).sqrt_information
        assert_allclose(U.T @ U, np.diag(1.0 / np.arange(1.0, 8.0)), atol=1e-12)
        assert_allclose(U, np.triu(U))


class DistillTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.frontend = loop_frontend()
        cls.graph = ground_truth_graph(cls.frontend, range(5), span=2)

    def test_noise_free_edge_gives_the_true_relative_pose(self):
        edge = self.graph.find_edge(1, 2)
        factor = distill_relative_pose(edge, self.graph, self.graph.find_edge(2, 1), start=SE3Pose.identity())
        gt = relative_pose(self.frontend.trajectory.gt[1], self.frontend.trajectory.gt[2])
        assert_allclose(factor.rel_pose.matrix(), gt.matrix(), atol=1e-6)
        self.assertAlmostEqual(factor.rel_pose.scale, 1.0, delta=1e-6)
        self.assertLess(factor.variance_factor, 1e-12)
        self.assertEqual(factor.n_observations, edge.n_valid + self.graph.find_edge(2, 1).n_valid)

    def test_one_direction_has_a_weak_scale(self):
        graph = ground_truth_graph(self.frontend, range(5), span=2)
        edge = graph.find_edge(0, 1)
        factor = distill_relative_pose(edge, graph)
        self.assertEqual(factor.rel_pose.scale, 1.0)
        self.assertGreater(factor.covariance[6, 6], 0.5)

    def test_covariance_grows_with_flow_noise(self):
        traces = []
        for sigma in (0.5, 1.0, 2.0):
            trace = 0.0
            for seed in range(3):
                frontend = loop_frontend(NoiseSpec(flow_sigma=sigma, prior_noise_sigma=0.0, scale_drift_rate=1.0,
                                                   yaw_drift=0.0), seed=seed, n=20)
                graph = ground_truth_graph(frontend, range(2), span=1)
                factor = distill_relative_pose(graph.find_edge(0, 1), graph, graph.find_edge(1, 0))
                trace += np.trace(factor.covariance[:6, :6])
            traces.append(trace)
        self.assertLess(traces[0], traces[1])
        self.assertLess(traces[1], traces[2])

    def test_confidence_scale_does_not_matter(self):
        frontend = loop_frontend(NoiseSpec(flow_sigma=1.0, prior_noise_sigma=0.0, scale_drift_rate=1.0,
                                           yaw_drift=0.0), seed=3, n=20)
        graph = ground_truth_graph(frontend, range(2), span=1)
        edge, reverse = graph.find_edge(0, 1), graph.find_edge(1, 0)
        factors = []
        for gain in (1.0, 2.0):
            scaled = [ReprojectionEdge(e.src, e.dst, e.targets, gain * e.confidences, active=e.active)
                      for e in (edge, reverse)]
            factors.append(distill_relative_pose(scaled[0], graph, scaled[1]))
        assert_allclose(factors[0].rel_pose.matrix(), factors[1].rel_pose.matrix(), atol=1e-6)
        assert_allclose(factors[0].covariance, factors[1].covariance, rtol=1e-3,
                        atol=1e-6 * np.abs(factors[0].covariance).max())

    def test_too_few_correspondences(self):
        edge = self.graph.find_edge(1, 2)
        conf = np.zeros_like(edge.confidences)
        conf[0, :10] = 1.0
        sparse = ReprojectionEdge(1, 2, edge.targets, conf, active=False)
        with self.assertRaises(DistillationError):
            distill_relative_pose(sparse, self.graph)

    def test_one_factor_per_pair(self):
        factors, dropped = distill_graph(self.graph)
        self.assertEqual(dropped, [])
        self.assertEqual(sorted(f.key for f in factors), [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4)])


class PgbaTests(unittest.TestCase):

    def test_needs_a_loop_edge(self):
        graph = ground_truth_graph(loop_frontend(n=20), range(4), span=1)
        with self.assertRaises(DegenerateProblemError):
            pgba(graph)

    def test_consistent_graph_is_left_alone(self):
        graph = gt_graph(loop_frontend())
        before = [kf.pose.matrix() for kf in graph.keyframes]
        result = pgba(graph)
        self.assertFalse(result.diverged)
        self.assertIsNone(result.init_report)
        for kf, pose in zip(graph.keyframes, before):
            assert_allclose(kf.pose.matrix(), pose, atol=1e-7)
        for s in result.scales.values():
            self.assertAlmostEqual(s, 1.0, delta=1e-7)

    def test_scale_moves_into_the_depths(self):
        graph = gt_graph(loop_frontend())
        edges = list(graph.edges)
        old = lift_to_sim3(graph)
        rng = np.random.default_rng(0)
        for kf in graph.keyframes:
            kf.pose = Sim3Pose(kf.pose.rotation, kf.pose.translation + rng.normal(0.0, 0.01, 3),
                               rng.uniform(0.5, 2.0))
        scales = {kf.id: kf.pose.scale for kf in graph.keyframes}
        before = [reprojection_residual(e, graph, jacobians=False).residuals for e in edges]
        updates, lowered = lower_to_se3(graph, old)
        after = [reprojection_residual(e, graph, jacobians=False).residuals for e in edges]
        for a, b in zip(before, after):
            assert_allclose(a, b, atol=1e-9)
        self.assertEqual(lowered, scales)
        self.assertTrue(all(isinstance(kf.pose, SE3Pose) for kf in graph.keyframes))
        self.assertEqual(set(updates), set(graph.ids))


class DriftCorrectionTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.frontend = loop_frontend(DRIFT, seed=1)
        cls.graph = drifted_graph(cls.frontend)
        cls.gt = dict(enumerate(cls.frontend.trajectory.gt))
        cls.ate_before = ate(as_dict(cls.graph), cls.gt)
        cls.result = pgba(cls.graph, max_iters=30)

    def test_loop_closure_reduces_drift(self):
        self.assertFalse(self.result.diverged)
        self.assertEqual(self.result.n_loop_edges, 4)
        self.assertLess(ate(as_dict(self.graph), self.gt), 0.5 * self.ate_before)

    def test_scales_follow_the_planted_drift(self):
        planted = self.frontend.trajectory.drift_scales
        recovered = np.array([self.result.scales[k] for k in range(N)])
        self.assertEqual(recovered[0], 1.0)
        self.assertLess(abs(recovered[-1] / planted[-1] - 1.0), 0.03)
        assert_allclose(recovered / planted, 1.0, atol=0.06)

    def test_deformation_updates_cover_every_keyframe(self):
        self.assertEqual(sorted(self.result.updates), list(range(N)))
        old, new, s = self.result.updates[N - 1]
        self.assertIs(new, self.graph.keyframe(N - 1).pose)
        self.assertEqual(s, self.result.scales[N - 1])

    def test_second_run_is_nearly_a_fixed_point(self):
        centers = [kf.pose.center() for kf in self.graph.keyframes]
        pgba(self.graph, max_iters=30)
        for kf, center in zip(self.graph.keyframes, centers):
            assert_allclose(kf.pose.center(), center, atol=1e-4)
