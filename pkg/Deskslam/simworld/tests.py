import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from randomgen import Xoshiro256

from Deskslam.exceptions import ConfigurationError, StorageError
from geom.lie import interpolate, relative_pose
from geom.models import Intrinsics, SE3Pose

from .correspondences import SimulatedFrontend, covisible, gen_correspondences, gen_depth_prior, warp
from .dataset import build_frontend, dump_dataset, load_dataset
from .models import NoiseSpec, SceneSpec, SphereSpec
from .noise import generator
from .scenes import build_scene, plane_scene, render_gt, room_scene
from .trajectories import gen_trajectory, look_at


def translated(x=0.0, y=0.0, z=0.0):
    """Camera moved to (x, y, z) without rotating."""
    return SE3Pose(translation=[-x, -y, -z])


def depth_at(scene, pose, K, uv):
    """Ray-traced depth through the sub-pixel location uv."""
    u0, v0 = np.floor(uv).astype(int)
    shifted = Intrinsics(K.fx, K.fy, K.cx - (uv[0] - u0), K.cy - (uv[1] - v0), K.width, K.height)
    return render_gt(scene, pose, shifted).depth[v0, u0]


class GeneratorTests(unittest.TestCase):

    def test_streams_are_xoshiro256(self):
        self.assertIsInstance(generator(3, 1).bit_generator, Xoshiro256)

    def test_same_keys_same_stream(self):
        assert_array_equal(generator(3, 1, 2).random(16), generator(3, 1, 2).random(16))

    def test_keys_split_streams(self):
        draws = [generator(*keys).random(8) for keys in ((3,), (3, 1), (3, 2), (4, 1))]
        for a in range(len(draws)):
            for b in range(a + 1, len(draws)):
                self.assertFalse(np.array_equal(draws[a], draws[b]))

    def test_frontend_priors_come_from_the_seeded_stream(self):
        K = Intrinsics.default(32, 24, 28.0)
        frontend = build_frontend('room', 'loop', 8, K, NoiseSpec(), seed=5)
        corners = generator(5, 2, 0x7072).uniform(*NoiseSpec().corner_range, size=(2, 2))
        assert_array_equal(frontend.prior(2)[1], corners)


class RenderGroundTruthTests(unittest.TestCase):

    def test_fronto_parallel_plane(self):
        K = Intrinsics.default(40, 30, 35.0)
        gt = render_gt(plane_scene(2.0), SE3Pose.identity(), K)
        assert_allclose(gt.depth, 2.0, rtol=1e-12)
        assert_allclose(gt.normals, np.broadcast_to([0.0, 0.0, -1.0], gt.normals.shape), atol=1e-12)

    def test_sphere_on_axis(self):
        scene = SceneSpec(spheres=(SphereSpec((0.0, 0.0, 2.0), 0.5),))
        K = Intrinsics.default(33, 33, 30.0)
        gt = render_gt(scene, SE3Pose.identity(), K)
        self.assertAlmostEqual(gt.depth[16, 16], 1.5, places=12)
        self.assertEqual(gt.depth[0, 0], 0.0)
        self.assertFalse(gt.valid[0, 0])

    def test_room_is_closed(self):
        K = Intrinsics.default(40, 30, 35.0)
        traj = gen_trajectory('loop', 8, NoiseSpec.clean())
        scene = room_scene(seed=1)
        for pose in traj.gt:
            self.assertGreaterEqual(render_gt(scene, pose, K).valid.mean(), 0.3)

    def test_warped_depth_matches_other_view(self):
        scene = room_scene()
        K = Intrinsics.default(80, 60, 69.0)
        traj = gen_trajectory('loop', 40, NoiseSpec.clean())
        pose_i, pose_j = traj.gt[0], traj.gt[1]
        depth_i = render_gt(scene, pose_i, K).depth
        depth_j = render_gt(scene, pose_j, K).depth
        visible, uv = covisible(depth_i, pose_i, pose_j, K, depth_j)
        points = pose_i.inverse().apply(K.rays(K.pixel_grid()) * depth_i[..., None])
        z = pose_j.apply(points)[..., 2]
        # keep points whose four neighbouring pixels in view j lie on the same surface
        interior = visible & K.contains(uv, margin=-1.0)
        u0 = np.clip(np.floor(uv[..., 0]).astype(int), 0, K.width - 2)
        v0 = np.clip(np.floor(uv[..., 1]).astype(int), 0, K.height - 2)
        for dv, du in ((0, 0), (0, 1), (1, 0), (1, 1)):
            interior &= np.abs(depth_j[v0 + dv, u0 + du] - z) < 0.01 * z
        rows, cols = np.nonzero(interior)
        rng = np.random.default_rng(0)
        for n in rng.choice(rows.size, size=25, replace=False):
            r, c = rows[n], cols[n]
            self.assertAlmostEqual(depth_at(scene, pose_j, K, uv[r, c]), z[r, c], delta=1e-6)

    def test_unknown_scene_kind(self):
        with self.assertRaises(ConfigurationError):
            build_scene('garden')


class CorrespondenceTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.default(64, 48, 60.0)

    def test_noise_free_targets_are_exact(self):
        scene = room_scene()
        traj = gen_trajectory('loop', 40, NoiseSpec.clean())
        pose_i, pose_j = traj.gt[3], traj.gt[4]
        corr = gen_correspondences(scene, pose_i, pose_j, self.K, NoiseSpec.clean())
        depth_i = render_gt(scene, pose_i, self.K).depth
        exact = warp(depth_i, relative_pose(pose_i, pose_j), self.K)
        visible = corr.confidences[..., 0] > 0
        self.assertGreater(visible.mean(), 0.5)
        assert_allclose(corr.targets[visible], exact[visible], atol=1e-9)
        assert_allclose(corr.confidences[visible], 1.0)

    def test_occluded_pixels_have_zero_confidence(self):
        scene = SceneSpec(planes=plane_scene(3.0).planes, spheres=(SphereSpec((0.0, 0.0, 1.5), 0.3),))
        pose_i, pose_j = SE3Pose.identity(), translated(x=0.5)
        corr = gen_correspondences(scene, pose_i, pose_j, self.K, NoiseSpec(flow_sigma=0.5))
        depth_i = render_gt(scene, pose_i, self.K).depth
        depth_j = render_gt(scene, pose_j, self.K).depth
        points = pose_i.inverse().apply(self.K.rays(self.K.pixel_grid()) * depth_i[..., None])
        uv = warp(depth_i, relative_pose(pose_i, pose_j), self.K)
        z = pose_j.apply(points)[..., 2]
        inside = self.K.contains(uv)
        rows = np.clip(np.round(uv[..., 1]).astype(int), 0, self.K.height - 1)
        cols = np.clip(np.round(uv[..., 0]).astype(int), 0, self.K.width - 1)
        hidden = inside & (depth_j[rows, cols] < 0.9 * z)
        self.assertGreater(hidden.sum(), 0)
        assert_array_equal(corr.confidences[hidden], 0.0)
        assert_array_equal(corr.confidences[~inside], 0.0)

    def test_noise_level(self):
        K = Intrinsics.default(160, 120, 140.0)
        scene = plane_scene(2.0)
        pose_i, pose_j = SE3Pose.identity(), translated(x=0.05)
        noise = NoiseSpec(flow_sigma=0.5)
        corr = gen_correspondences(scene, pose_i, pose_j, K, noise, np.random.default_rng(7))
        exact = warp(render_gt(scene, pose_i, K).depth, relative_pose(pose_i, pose_j), K)
        visible = corr.confidences[..., 0] > 0
        errors = (corr.targets - exact)[visible].ravel()
        self.assertGreater(errors.size, 10_000)
        self.assertAlmostEqual(errors.std(), 0.5, delta=0.025)
        assert_allclose(corr.confidences[visible], 1.0 / 1.25)

    def test_no_overlap_gives_empty_edge(self):
        pose_j = look_at((0.0, 0.0, 0.0), (0.0, 0.0, -1.0))
        corr = gen_correspondences(plane_scene(2.0), SE3Pose.identity(), pose_j, self.K, NoiseSpec())
        self.assertTrue(corr.empty)
        self.assertEqual(corr.mean_flow, float('inf'))


class DepthPriorTests(unittest.TestCase):

    def test_unit_corners_reproduce_ground_truth(self):
        gt = np.random.default_rng(0).uniform(1.0, 3.0, size=(30, 40))
        prior, _ = gen_depth_prior(gt, NoiseSpec.clean())
        assert_allclose(prior, gt, rtol=1e-15)

    def test_bilinear_midpoint(self):
        gt = np.ones((31, 41))
        prior, corners = gen_depth_prior(gt, NoiseSpec.clean(), corners=[[1.0, 2.0], [3.0, 4.0]])
        self.assertAlmostEqual(prior[15, 20], 0.4, places=12)
        self.assertEqual(prior[0, 0], 1.0)
        self.assertEqual(prior[30, 40], 0.25)
        assert_array_equal(corners, [[1.0, 2.0], [3.0, 4.0]])

    def test_rough_field_keeps_top_left_multiplier(self):
        noise = NoiseSpec(flow_sigma=0.0, prior_noise_sigma=0.0, smooth_field=False)
        prior, corners = gen_depth_prior(np.ones((10, 10)), noise, corners=[[1.5, 2.0], [3.0, 4.0]])
        assert_allclose(prior, 1.0 / 1.5)

    def test_drawn_corners_stay_in_range(self):
        _, corners = gen_depth_prior(np.ones((8, 8)), NoiseSpec(), np.random.default_rng(3))
        self.assertTrue(np.all((corners >= 0.7) & (corners <= 1.4)))

    def test_invalid_noise(self):
        with self.assertRaises(ConfigurationError):
            NoiseSpec(flow_sigma=-1.0)
        with self.assertRaises(ConfigurationError):
            NoiseSpec(prior_corners=((1.0, 0.0), (1.0, 1.0)))


class TrajectoryTests(unittest.TestCase):

    def test_zero_drift_reproduces_ground_truth(self):
        for kind in ('straight', 'loop', 'forward_rotate', 'revisit'):
            traj = gen_trajectory(kind, 12, NoiseSpec.clean())
            for gt, drifted in zip(traj.gt, traj.drifted):
                assert_allclose(drifted.matrix(), gt.matrix(), atol=1e-12)

    def test_loop_closes(self):
        traj = gen_trajectory('loop', 50, NoiseSpec.clean())
        gap = np.linalg.norm(traj.gt[-1].center() - traj.gt[0].center())
        self.assertLess(gap, 0.1)
        self.assertGreater(gap, 0.0)

    def test_drift_profile(self):
        noise = NoiseSpec(scale_drift_rate=1.01, yaw_drift=0.004)
        traj = gen_trajectory('loop', 50, noise)
        assert_allclose(traj.drift_scales, 1.01 ** np.arange(50))
        step_gt = traj.gt[10].compose(traj.gt[9].inverse())
        step = traj.drifted[10].compose(traj.drifted[9].inverse())
        assert_allclose(step.translation, step_gt.translation * 1.01 ** 10, atol=1e-12)
        self.assertGreater(np.linalg.norm(traj.drifted[-1].center() - traj.gt[-1].center()), 0.05)

    def test_forward_then_rotate_turns_in_place(self):
        traj = gen_trajectory('forward_rotate', 10, NoiseSpec.clean())
        assert_allclose(traj.gt[-1].center(), traj.gt[4].center(), atol=1e-12)

    def test_invalid_requests(self):
        with self.assertRaises(ConfigurationError):
            gen_trajectory('spiral', 10)
        with self.assertRaises(ConfigurationError):
            gen_trajectory('loop', 1)


class FrontendTests(unittest.TestCase):

    K = Intrinsics.default(64, 48, 55.0)

    def frontend(self, seed=0, noise=None):
        return build_frontend('room', 'loop', 24, self.K, noise or NoiseSpec(), seed, graph_stride=2)

    def test_same_seed_is_bit_identical(self):
        a, b = self.frontend(seed=5), self.frontend(seed=5)
        assert_array_equal(a.edge(2, 3).targets, b.edge(2, 3).targets)
        assert_array_equal(a.prior(4)[0], b.prior(4)[0])

    def test_call_order_does_not_matter(self):
        a, b = self.frontend(seed=5), self.frontend(seed=5)
        a.edge(0, 1)
        assert_array_equal(a.edge(1, 2).targets, b.edge(1, 2).targets)

    def test_seed_changes_priors(self):
        a, b = self.frontend(seed=1), self.frontend(seed=2)
        self.assertFalse(np.array_equal(a.prior(0)[1], b.prior(0)[1]))

    def test_graph_resolution(self):
        frontend = self.frontend()
        self.assertEqual(frontend.K.shape, (24, 32))
        edge = frontend.edge(0, 1)
        self.assertEqual(edge.targets.shape, (24, 32, 2))
        self.assertEqual(frontend.gt_keyframe(0).image.shape, (48, 64, 3))

    def test_loop_edges_follow_ground_truth(self):
        noise = NoiseSpec(flow_sigma=0.0, prior_noise_sigma=0.0, scale_drift_rate=1.05, yaw_drift=0.01)
        frontend = self.frontend(noise=noise)
        traj = frontend.trajectory
        K = frontend.K
        local, loop = frontend.edge(5, 6), frontend.edge(5, 6, loop=True)
        depth = frontend.gt(5).depth
        exact = warp(depth, relative_pose(traj.gt[5], traj.gt[6]), K)
        drifted = warp(depth * traj.drift_scales[5], relative_pose(traj.drifted[5], traj.drifted[6]), K)
        visible = loop.confidences[..., 0] > 0
        assert_allclose(loop.targets[visible], exact[visible], atol=1e-9)
        assert_allclose(local.targets[visible], drifted[visible], atol=1e-9)
        self.assertTrue(loop.loop)
        self.assertFalse(loop.active)

    def test_mean_flow_grows_with_baseline(self):
        frontend = self.frontend()
        self.assertEqual(frontend.mean_flow(3, 3), 0.0)
        self.assertLess(frontend.mean_flow(3, 4), frontend.mean_flow(3, 6))

    def test_inserted_view_sits_between_its_neighbours(self):
        frontend = self.frontend()
        k = frontend.insert_view(3, 4)
        self.assertEqual(k, 24)
        self.assertEqual(len(frontend), 25)
        traj = frontend.trajectory
        assert_allclose(interpolate(traj.gt[3], traj.gt[k], 2.0).matrix(), traj.gt[4].matrix(), atol=1e-9)
        self.assertLess(frontend.mean_flow(3, k), frontend.mean_flow(3, 4))
        self.assertIsNotNone(frontend.edge(k, 4))

    def test_length_follows_trajectory(self):
        frontend = SimulatedFrontend(room_scene(), gen_trajectory('loop', 4), self.K, seed=0, graph_stride=4)
        self.assertEqual(len(frontend), 4)


class DatasetTests(unittest.TestCase):

    def test_dump_and_reload(self):
        K = Intrinsics.default(32, 24, 28.0)
        frontend = build_frontend('room', 'straight', 4, K, NoiseSpec(), seed=3, graph_stride=4)
        with tempfile.TemporaryDirectory() as tmp:
            dump_dataset(tmp, frontend, span=1)
            dataset = load_dataset(tmp)
        self.assertEqual(dataset.config['N_KEYFRAMES'], 4)
        self.assertEqual(dataset.config['SEED'], 3)
        self.assertEqual(dataset.K, K)
        assert_array_equal(dataset.stamps, [0.0, 1.0, 2.0, 3.0])
        for est, gt in zip(dataset.gt_poses, frontend.trajectory.gt):
            assert_allclose(est.matrix(), gt.matrix(), atol=1e-8)
        self.assertEqual(dataset.graph.ids, [0, 1, 2, 3])
        self.assertEqual(len(dataset.graph.edges), 6)
        assert_allclose(dataset.depths[2], frontend.full(2).depth, rtol=1e-6)
        assert_allclose(dataset.priors[2], frontend.prior(2)[0], rtol=1e-6)
        assert_allclose(dataset.colors[1], frontend.full(1).color, atol=1.0 / 255)

    def test_missing_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(StorageError):
                load_dataset(tmp)

    def test_incomplete_scene_cfg(self):
        with tempfile.TemporaryDirectory() as tmp:
            with open(f"{tmp}/scene.cfg", 'w') as fh:
                fh.write("SEED=3\n")
            with self.assertRaises(StorageError):
                load_dataset(tmp)
