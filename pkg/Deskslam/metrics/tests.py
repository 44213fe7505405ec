import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import ConfigurationError, EmptyMaskError, InsufficientDataError, ShapeMismatchError
from geom.models import SE3Pose

from .evaluation import ate, depth_metrics, psnr, umeyama
from .report import STAGES, dumps, empty_report, read_report, write_report


def random_trajectory(rng, n):
    quats = Rotation.random(n, random_state=int(rng.integers(1 << 31))).as_quat()
    return [SE3Pose(q, rng.uniform(-1.0, 1.0, size=3)) for q in quats]


def transformed(poses, rotation, translation, scale=1.0):
    """Same cameras in a world moved by x -> s R x + t."""
    out = []
    for pose in poses:
        c = scale * rotation @ pose.center() + translation
        R = pose.rotation_matrix @ rotation.T
        out.append(SE3Pose.from_rt(R, -R @ c))
    return out


class AteTests(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.gt = random_trajectory(self.rng, 20)
        self.R = Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix()
        self.t = np.array([1.0, -2.0, 0.5])

    def test_identical(self):
        self.assertAlmostEqual(ate(self.gt, self.gt), 0.0, places=12)

    def test_scaled_estimate_under_sim3(self):
        est = transformed(self.gt, np.eye(3), np.zeros(3), scale=3.0)
        self.assertLess(ate(est, self.gt, 'sim3'), 1e-9)
        self.assertGreater(ate(est, self.gt, 'se3'), 0.1)

    def test_invariant_to_rigid_world_change(self):
        est = [SE3Pose(p.rotation, p.translation + self.rng.normal(0.0, 0.05, size=3)) for p in self.gt]
        moved_est = transformed(est, self.R, self.t)
        moved_gt = transformed(self.gt, self.R, self.t)
        for alignment in ('se3', 'sim3'):
            self.assertAlmostEqual(ate(moved_est, moved_gt, alignment), ate(est, self.gt, alignment), places=9)

    def test_gaussian_position_noise(self):
        sigma = 0.01
        gt = random_trajectory(self.rng, 1000)
        est = transformed(gt, np.eye(3), np.zeros(3))
        est = [SE3Pose.from_rt(p.rotation_matrix, -p.rotation_matrix @ (p.center() + n))
               for p, n in zip(est, self.rng.normal(0.0, sigma, size=(1000, 3)))]
        self.assertAlmostEqual(ate(est, gt, 'se3') / (sigma * np.sqrt(3)), 1.0, delta=0.1)

    def test_association_by_id(self):
        est = {i: p for i, p in enumerate(self.gt) if i % 3}
        gt = {i: p for i, p in enumerate(self.gt)}
        gt[100] = self.gt[0]
        self.assertAlmostEqual(ate(est, gt), 0.0, places=12)

    def test_too_few_poses(self):
        with self.assertRaises(InsufficientDataError):
            ate(self.gt[:2], self.gt[:2])
        with self.assertRaises(InsufficientDataError):
            ate({0: self.gt[0]}, {1: self.gt[1]})

    def test_unknown_alignment(self):
        with self.assertRaises(ConfigurationError):
            ate(self.gt, self.gt, 'affine')

    def test_umeyama_recovers_similarity(self):
        points = self.rng.normal(size=(30, 3))
        target = 2.5 * points @ self.R.T + self.t
        transform = umeyama(points, target)
        assert_allclose(transform.rotation, self.R, atol=1e-12)
        assert_allclose(transform.translation, self.t, atol=1e-12)
        self.assertAlmostEqual(transform.scale, 2.5, places=12)


class DepthMetricTests(unittest.TestCase):

    def setUp(self):
        self.gt = np.random.default_rng(0).uniform(0.5, 3.0, size=(24, 32))

    def test_identical(self):
        m = depth_metrics(self.gt, self.gt)
        self.assertEqual((m.abs_diff, m.abs_rel, m.sq_rel, m.rmse, m.delta_105, m.delta_125),
                         (0.0, 0.0, 0.0, 0.0, 1.0, 1.0))

    def test_uniform_overestimate(self):
        m = depth_metrics(1.2 * self.gt, self.gt)
        self.assertAlmostEqual(m.abs_rel, 0.2, places=12)
        self.assertAlmostEqual(m.sq_rel, 0.04 * self.gt.mean(), places=12)
        self.assertEqual(m.delta_105, 0.0)
        self.assertEqual(m.delta_125, 1.0)

    def test_mask_selects_pixels(self):
        est = self.gt.copy()
        est[:, :16] *= 2.0
        mask = np.zeros_like(self.gt, dtype=bool)
        mask[:, 16:] = True
        self.assertEqual(depth_metrics(est, self.gt, mask).abs_rel, 0.0)

    def test_empty_mask(self):
        with self.assertRaises(EmptyMaskError):
            depth_metrics(self.gt, self.gt, np.zeros_like(self.gt, dtype=bool))
        with self.assertRaises(EmptyMaskError):
            depth_metrics(self.gt, np.zeros_like(self.gt))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            depth_metrics(self.gt, self.gt[:, :10])


class PsnrTests(unittest.TestCase):

    def test_identical_is_infinite(self):
        image = np.full((8, 8, 3), 0.4)
        self.assertEqual(psnr(image, image), float('inf'))

    def test_constant_offset(self):
        self.assertAlmostEqual(psnr(np.zeros((16, 16)), np.full((16, 16), 0.1)), 20.0, places=9)

    def test_gaussian_noise(self):
        rng = np.random.default_rng(8)
        reference = rng.uniform(0.2, 0.8, size=(400, 400, 3))
        noisy = reference + rng.normal(0.0, 0.01, size=reference.shape)
        self.assertAlmostEqual(psnr(noisy, reference), 40.0, delta=0.5)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class ReportTests(unittest.TestCase):

    def test_schema_has_every_stage(self):
        report = empty_report(seed=7)
        self.assertEqual(set(report['stages']), set(STAGES))
        self.assertTrue(all(v is None for v in report['stages'].values()))

    def test_sentinels(self):
        report = empty_report(seed=0)
        report['psnr'] = float('inf')
        report['loops'] = np.int64(3)
        report['map'] = {'error': float('nan')}
        text = dumps(report)
        self.assertIn('"psnr": "inf"', text)
        self.assertIn('"loops": 3', text)
        self.assertIn('"error": null', text)

    def test_write_is_byte_stable(self):
        report = empty_report(seed=1)
        report['depth']['ba'] = {'abs_rel': 0.125}
        with tempfile.TemporaryDirectory() as tmp:
            a = write_report(Path(tmp) / 'a' / 'report.json', report)
            b = write_report(Path(tmp) / 'b' / 'report.json', dict(reversed(list(report.items()))))
            self.assertEqual(a.read_bytes(), b.read_bytes())
            self.assertEqual(read_report(a)['depth']['ba'], {'abs_rel': 0.125})
