import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import ConfigurationError, InitializationError
from factor_graph.problems import BundleAdjustment
from geom.io import read_tum
from geom.models import Intrinsics, SE3Pose
from metrics.evaluation import ate, depth_metrics
from simworld.correspondences import SimulatedFrontend
from simworld.dataset import build_frontend, ground_truth_graph
from simworld.models import NoiseSpec, Trajectory
from simworld.scenes import room_scene

from .models import StepReport, TrackerConfig
from .tracking import Tracker, initialize, insert_keyframe, jdsa_step, local_ba_step, select_keyframe

K = Intrinsics.default(64, 48, 55.0)
# every frame becomes a keyframe; every window keyframe that overlaps gets edges
DENSE = TrackerConfig(d_flow=0.5, overlap_flow_factor=100.0)
DISTORTED = NoiseSpec(flow_sigma=0.0, prior_corners=((1.0, 1.15), (0.9, 1.1)), prior_noise_sigma=0.0,
                      scale_drift_rate=1.0, yaw_drift=0.0)


def loop_frontend(n=60, noise=None, seed=0):
    return build_frontend('room', 'loop', n, K, noise or NoiseSpec.clean(), seed, graph_stride=2)


def gt_poses(frontend, ids):
    return {k: frontend.trajectory.gt[k] for k in ids}


class SelectKeyframeTests(unittest.TestCase):

    def test_threshold_is_strict(self):
        cfg = TrackerConfig(d_flow=8.0)
        self.assertFalse(select_keyframe(0.0, cfg))
        self.assertFalse(select_keyframe(8.0, cfg))
        self.assertTrue(select_keyframe(9.0, cfg))

    def test_config_invariants(self):
        with self.assertRaises(ConfigurationError):
            TrackerConfig(n_init=2)
        with self.assertRaises(ConfigurationError):
            TrackerConfig(window=1)
        with self.assertRaises(ConfigurationError):
            TrackerConfig(ba_jdsa_interleave=0)
        self.assertEqual(TrackerConfig(d_flow=8.0, overlap_flow_factor=2.0).overlap_flow, 16.0)


class InitializeTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.frontend = loop_frontend(noise=DISTORTED)
        cls.cfg = TrackerConfig(init_iters=50)
        cls.ids = list(range(12))
        cls.graph = initialize(cls.frontend, cls.ids, cls.cfg)

    def test_mean_depth_is_one(self):
        self.assertAlmostEqual(self.graph.mean_depth(), 1.0, delta=1e-9)

    def test_edges_within_span(self):
        self.assertEqual(len(self.graph.edges), 60)
        self.assertTrue(all(abs(e.src - e.dst) <= 3 for e in self.graph.edges))

    def test_first_two_poses_are_fixed(self):
        self.assertEqual([kf.is_pose_fixed for kf in self.graph.keyframes[:3]], [True, True, False])
        assert_allclose(self.graph.keyframe(0).pose.matrix(), np.eye(4), atol=1e-15)

    def test_window_solve_holds_the_anchor_pair(self):
        report = StepReport(self.ids[-1])
        with mock.patch('tracker.tracking.BundleAdjustment', wraps=BundleAdjustment) as problem:
            initialize(self.frontend, self.ids, self.cfg, report=report)
        free = [list(call.args[1]) for call in problem.call_args_list]
        self.assertEqual(free[-2:], [self.ids[1:2], self.ids[2:]])
        self.assertEqual(len(report.ba), 2)
        self.assertFalse(report.diverged)

    def test_noise_free_trajectory_matches_up_to_similarity(self):
        est = dict(zip(self.graph.ids, self.graph.poses()))
        self.assertLess(ate(est, gt_poses(self.frontend, self.ids), 'sim3'), 1e-6)

    def test_wrong_buffer_size(self):
        with self.assertRaises(InitializationError):
            initialize(self.frontend, range(5), self.cfg)

    def test_pure_rotation_has_no_parallax(self):
        center = np.array([0.0, -0.2, -1.2])
        poses = []
        for k in range(12):
            R = Rotation.from_euler('y', np.radians(2.0 * k)).as_matrix()
            poses.append(SE3Pose.from_rt(R, -R @ center))
        trajectory = Trajectory('custom', poses, poses, np.ones(12))
        frontend = SimulatedFrontend(room_scene(), trajectory, K, NoiseSpec.clean(), seed=0, graph_stride=2)
        with self.assertRaises(InitializationError):
            initialize(frontend, range(12))


class WindowStepTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.frontend = loop_frontend()
        cls.tracker = Tracker(cls.frontend, DENSE)
        cls.graph = cls.tracker.run(range(16))

    def test_every_frame_became_a_keyframe(self):
        self.assertEqual(self.graph.ids, list(range(16)))
        self.assertEqual(len(self.tracker.reports), 5)

    def test_edges_outside_the_window_are_retired(self):
        window = set(self.graph.window_ids())
        for edge in self.graph.edges:
            self.assertEqual(edge.active, edge.src in window and edge.dst in window)
        self.assertTrue(self.graph.inactive_edges())

    def test_states_outside_the_window_are_untouched(self):
        outside = [kf for kf in self.graph.keyframes if kf.id not in self.graph.window_ids()]
        before = [(kf.pose.matrix(), kf.inv_depth.copy(), kf.scale_grid.coefficients.copy()) for kf in outside]
        local_ba_step(self.graph, self.graph.ids[-1], DENSE)
        jdsa_step(self.graph, DENSE)
        for kf, (pose, inv_depth, grid) in zip(outside, before):
            assert_array_equal(kf.pose.matrix(), pose)
            assert_array_equal(kf.inv_depth, inv_depth)
            assert_array_equal(kf.scale_grid.coefficients, grid)

    def test_converged_window_is_a_fixed_point(self):
        local_ba_step(self.graph, self.graph.ids[-1], DENSE)
        window = self.graph.window_ids()
        problem = BundleAdjustment(self.graph, window[2:], window, self.graph.active_edges())
        before = problem.objective()
        local_ba_step(self.graph, self.graph.ids[-1], DENSE)
        self.assertLess(abs(problem.objective() - before), 1e-12)

    def test_noise_free_tracking_is_accurate(self):
        est = dict(zip(*self.tracker.trajectory()))
        self.assertLess(ate(est, gt_poses(self.frontend, self.graph.ids), 'sim3'), 1e-4)

    def test_keyframes_must_move_forward(self):
        with self.assertRaises(InitializationError):
            self.tracker.observe(3)


class JdsaStepTests(unittest.TestCase):

    def test_consistent_priors_are_left_alone(self):
        graph = ground_truth_graph(loop_frontend(24), range(8), span=2)
        before = [kf.inv_depth.copy() for kf in graph.keyframes]
        report = jdsa_step(graph)
        self.assertEqual(report.accepted, 0)
        for kf, inv_depth in zip(graph.keyframes, before):
            assert_allclose(kf.inv_depth, inv_depth, rtol=1e-12)

    def test_alignment_beats_bundle_adjustment_alone(self):
        noise = NoiseSpec(flow_sigma=0.5, prior_noise_sigma=0.0, scale_drift_rate=1.0, yaw_drift=0.0)
        frontend = loop_frontend(60, noise, seed=4)
        errors = []
        for with_jdsa in (False, True):
            graph = ground_truth_graph(frontend, range(8), span=3)
            for kf in graph.keyframes:
                kf.inv_depth = 1.0 / kf.prior_depth
            for _ in range(3):
                local_ba_step(graph, 7)
                if with_jdsa:
                    jdsa_step(graph)
            errors.append(np.mean([depth_metrics(kf.depth, frontend.gt(kf.id).depth).abs_rel
                                   for kf in graph.keyframes]))
        self.assertLess(errors[1], errors[0])


class TrackerTests(unittest.TestCase):

    def test_live_trajectory_file(self):
        frontend = loop_frontend(40)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'live' / 'traj.txt'
            tracker = Tracker(frontend, DENSE, dump_traj=path)
            graph = tracker.run(range(13))
            stamps, poses = read_tum(path)
        assert_array_equal(stamps, graph.ids)
        for pose, kf in zip(poses, graph.keyframes):
            assert_allclose(pose.matrix(), kf.pose.matrix(), atol=1e-8)

    def test_same_seed_same_trajectory(self):
        noise = NoiseSpec(flow_sigma=0.5)
        runs = [Tracker(loop_frontend(40, noise, seed=2), DENSE).run(range(14)) for _ in range(2)]
        for a, b in zip(*(graph.keyframes for graph in runs)):
            assert_array_equal(a.pose.matrix(), b.pose.matrix())
            assert_array_equal(a.inv_depth, b.inv_depth)

    def test_too_few_keyframes(self):
        with self.assertRaises(InitializationError):
            Tracker(loop_frontend(40), DENSE).run(range(6))

    def test_fixed_keyframes_keep_their_scale(self):
        frontend = loop_frontend(50, NoiseSpec(flow_sigma=0.5), seed=1)
        tracker = Tracker(frontend, DENSE)
        for k in range(DENSE.n_init):
            tracker.observe(k)
        initial = tracker.graph.mean_depth(tracker.graph.ids[:2])
        tracker.run(range(DENSE.n_init, 50))
        self.assertEqual(len(tracker.graph), 50)
        self.assertLess(abs(tracker.graph.mean_depth(tracker.graph.ids[:2]) / initial - 1.0), 0.01)

    def test_bundle_adjustment_only(self):
        cfg = TrackerConfig(d_flow=0.5, overlap_flow_factor=100.0, jdsa=False)
        tracker = Tracker(loop_frontend(40), cfg)
        graph = tracker.run(range(14))
        self.assertTrue(all(report.jdsa == [] for report in tracker.reports))
        for kf in graph.keyframes:
            self.assertEqual(np.ptp(kf.scale_grid.coefficients), 0.0)


class InsertKeyframeTests(unittest.TestCase):

    def test_inserted_keyframe_lands_between_its_neighbours(self):
        frontend = loop_frontend(30)
        graph = ground_truth_graph(frontend, range(6), span=2)
        n_edges = len(graph.edges)
        kf, report = insert_keyframe(graph, frontend, 2, 3)
        self.assertEqual(kf.id, 30)
        self.assertEqual(graph.ids[-1], 30)
        new_edges = graph.edges[n_edges:]
        self.assertEqual(sorted(e.key for e in new_edges), [(2, 30), (3, 30), (30, 2), (30, 3)])
        self.assertFalse(any(e.active for e in new_edges))
        self.assertFalse(report.diverged)
        assert_allclose(kf.pose.matrix(), frontend.trajectory.gt[30].matrix(), atol=1e-6)
        self.assertLess(depth_metrics(kf.depth, frontend.gt(30).depth).abs_rel, 5e-3)
