import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy.linalg import expm

from Deskslam.exceptions import BehindCameraError, BranchAmbiguityError, ConfigurationError, InvalidDepthError

from .camera import backproject, project, reproject
from .io import read_tum, write_tum
from .lie import adjoint, exp_map, hat, interpolate, left_update, log_map
from .models import Intrinsics, SE3Pose, Sim3Pose


def random_pose(rng, sim3=False):
    xi = rng.normal(scale=0.4, size=7 if sim3 else 6)
    return exp_map(xi)


def rodrigues_oracle(xi):
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    k = w / theta
    K = hat(k)
    R = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K
    V = np.eye(3) + (1 - np.cos(theta)) / theta * K + (theta - np.sin(theta)) / theta * K @ K
    return R, V @ v


class ExpLogTests(unittest.TestCase):

    def test_zero_twist_is_identity(self):
        pose = exp_map(np.zeros(6))
        assert_allclose(pose.matrix(), np.eye(4), atol=1e-15)

    def test_quarter_turn_about_z(self):
        pose = exp_map([0, 0, 0, 0, 0, np.pi / 2])
        assert_allclose(pose.rotation_matrix, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
        assert_allclose(pose.translation, 0.0, atol=1e-15)

    def test_matches_rodrigues_oracle(self):
        xi = np.array([0.1, -0.2, 0.3, 0.05, 0.02, -0.04])
        R, t = rodrigues_oracle(xi)
        pose = exp_map(xi)
        assert_allclose(pose.rotation_matrix, R, atol=1e-12)
        assert_allclose(pose.translation, t, atol=1e-12)

    def test_sim3_exp_matches_matrix_exponential(self):
        xi = np.array([0.3, -0.1, 0.2, 0.1, -0.3, 0.25, 0.4])
        X = np.zeros((4, 4))
        X[:3, :3] = hat(xi[3:6]) + xi[6] * np.eye(3)
        X[:3, 3] = xi[:3]
        assert_allclose(exp_map(xi).matrix(), expm(X), atol=1e-12)

    def test_log_of_identity(self):
        assert_allclose(log_map(SE3Pose.identity()), np.zeros(6), atol=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            for size in (6, 7):
                xi = rng.normal(scale=0.5, size=size)
                assert_allclose(log_map(exp_map(xi)), xi, atol=1e-9)

    def test_pure_scale_log(self):
        xi = log_map(Sim3Pose(scale=2.0))
        assert_allclose(xi, [0, 0, 0, 0, 0, 0, np.log(2.0)], atol=1e-12)

    def test_small_sigma_round_trip(self):
        for sigma in (1e-9, 1e-6, -1e-4):
            xi = np.array([0.2, 0.1, -0.3, 1e-7, 0.0, 2e-7, sigma])
            assert_allclose(log_map(exp_map(xi)), xi, atol=1e-10)

    def test_branch_cut_is_flagged(self):
        pose = exp_map([0, 0, 0, np.pi, 0, 0])
        with self.assertRaises(BranchAmbiguityError):
            log_map(pose)


class GroupTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_inverse_law(self):
        for sim3 in (False, True):
            p = random_pose(self.rng, sim3)
            e = p.compose(p.inverse())
            self.assertLess(np.linalg.norm(log_map(e)[3:6]), 1e-9)
            self.assertLess(np.linalg.norm(e.translation), 1e-9)
            self.assertAlmostEqual(np.linalg.norm(e.rotation), 1.0, delta=1e-9)

    def test_associativity(self):
        for sim3 in (False, True):
            a, b, c = (random_pose(self.rng, sim3) for _ in range(3))
            assert_allclose(a.compose(b).compose(c).matrix(), a.compose(b.compose(c)).matrix(), atol=1e-9)

    def test_unit_scale_sim3_embeds_se3(self):
        a, b = random_pose(self.rng), random_pose(self.rng)
        pts = self.rng.normal(size=(10, 3))
        sa, sb = Sim3Pose.from_se3(a), Sim3Pose.from_se3(b)
        assert_allclose(sa.compose(sb).matrix(), a.compose(b).matrix(), atol=1e-12)
        assert_allclose(sa.apply(pts), a.apply(pts), atol=1e-12)
        assert_allclose(sa.inverse().matrix(), a.inverse().matrix(), atol=1e-12)
        assert_allclose(log_map(sa)[:6], log_map(a), atol=1e-12)

    def test_adjoint_moves_twists_across_a_pose(self):
        for sim3 in (False, True):
            T = random_pose(self.rng, sim3)
            xi = self.rng.normal(scale=0.1, size=7 if sim3 else 6)
            lhs = T.compose(exp_map(xi)).compose(T.inverse())
            assert_allclose(lhs.matrix(), exp_map(adjoint(T) @ xi).matrix(), atol=1e-10)

    def test_left_update(self):
        T = random_pose(self.rng)
        xi = self.rng.normal(scale=0.1, size=6)
        assert_allclose(left_update(T, xi).matrix(), exp_map(xi).matrix() @ T.matrix(), atol=1e-12)

    def test_interpolation_endpoints_and_midpoint(self):
        a, b = random_pose(self.rng), random_pose(self.rng)
        assert_allclose(interpolate(a, b, 0.0).matrix(), a.matrix(), atol=1e-12)
        assert_allclose(interpolate(a, b, 1.0).matrix(), b.matrix(), atol=1e-9)
        mid = interpolate(a, b, 0.5)
        assert_allclose(interpolate(a, mid, 2.0).matrix(), b.matrix(), atol=1e-9)

    def test_negative_scale_rejected(self):
        with self.assertRaises(ConfigurationError):
            Sim3Pose(scale=-1.0)


class CameraTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)

    def test_project_on_axis(self):
        assert_allclose(project(SE3Pose.identity(), [0, 0, 1], self.K), [50, 50])

    def test_project_analytic(self):
        assert_allclose(project(SE3Pose.identity(), [1, 0, 2], self.K), [100, 50])

    def test_behind_camera_carries_depth(self):
        with self.assertRaises(BehindCameraError) as ctx:
            project(SE3Pose.identity(), [0, 0, -0.5], self.K)
        self.assertEqual(ctx.exception.depth, -0.5)

    def test_backproject(self):
        assert_allclose(backproject([50, 50], 1.0, self.K), [0, 0, 1])
        assert_allclose(backproject([150, 50], 0.5, self.K), [2, 0, 2])

    def test_backproject_rejects_nonpositive_depth(self):
        with self.assertRaises(InvalidDepthError):
            backproject([50, 50], 0.0, self.K)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pix = rng.uniform(0, 100, size=2)
            d = rng.uniform(0.2, 2.0)
            X = backproject(pix, d, self.K)
            assert_allclose(project(SE3Pose.identity(), X, self.K), pix, atol=1e-9)
            assert_allclose(backproject(project(SE3Pose.identity(), X, self.K), 1.0 / X[2], self.K), X, atol=1e-9)

    def test_intrinsics_invariants(self):
        with self.assertRaises(ConfigurationError):
            Intrinsics(-1.0, 100.0, 50.0, 50.0, 100, 100)
        with self.assertRaises(ConfigurationError):
            Intrinsics(100.0, 100.0, 150.0, 50.0, 100, 100)

    def test_downsample(self):
        K = Intrinsics.default(320, 240, 277.0).downsample(4)
        self.assertEqual((K.width, K.height), (80, 60))
        self.assertAlmostEqual(K.fx, 277.0 / 4)

    def test_reprojection_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-6
        for sim3 in (False, True):
            T = exp_map(rng.normal(scale=0.05, size=7 if sim3 else 6))
            pix = rng.uniform(20, 80, size=(5, 2))
            d = rng.uniform(0.3, 1.0, size=5)
            _, _, _, J_pose, J_d = reproject(T, pix, d, self.K)
            for k in range(J_pose.shape[2]):
                e = np.zeros(J_pose.shape[2])
                e[k] = h
                up = reproject(left_update(T, e), pix, d, self.K, jacobians=False)[0]
                dn = reproject(left_update(T, -e), pix, d, self.K, jacobians=False)[0]
                assert_allclose(J_pose[:, :, k], (up - dn) / (2 * h), rtol=1e-4, atol=1e-5)
            up = reproject(T, pix, d + h, self.K, jacobians=False)[0]
            dn = reproject(T, pix, d - h, self.K, jacobians=False)[0]
            assert_allclose(J_d, (up - dn) / (2 * h), rtol=1e-4, atol=1e-5)


class TrajectoryFileTests(unittest.TestCase):

    def test_write_then_read(self):
        rng = np.random.default_rng(5)
        poses = [random_pose(rng) for _ in range(4)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'traj.txt')
            write_tum(path, range(4), poses)
            with open(path, 'rb') as fh:
                raw = fh.read()
            self.assertNotIn(b'\r', raw)
            self.assertEqual(len(raw.decode('utf-8').splitlines()[0].split()), 8)
            stamps, loaded = read_tum(path)
        assert_allclose(stamps, [0, 1, 2, 3])
        for a, b in zip(poses, loaded):
            assert_allclose(a.matrix(), b.matrix(), atol=1e-8)
