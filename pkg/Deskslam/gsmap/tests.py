import os
import tempfile
import unittest

import numpy as np
import torch
from numpy.testing import assert_allclose
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import BehindCameraError, MapGraphDesyncError
from factor_graph.models import KeyframeState
from geom.lie import exp_map
from geom.models import Intrinsics, SE3Pose
from metrics.evaluation import psnr
from simworld.dataset import build_frontend
from simworld.models import NoiseSpec

from .coverage import coverage_analysis
from .io import load_ply, read_ppm, save_ply, write_ppm
from .losses import apply_exposure, compute_loss, fit_exposure
from .mapping import Mapper, deform_map, densify_prune, init_from_keyframe, joint_refine, optimize_map
from .models import ExposureParams, GaussianMap, GaussianPrimitive, LossWeights, MapConfig, MapTargets
from .render import ALPHA_MIN, SIGMA_CUTOFF, normals_from_depth, project_gaussian, render, unbiased_depth


def random_gaussians(rng, n):
    prims = []
    for k in range(n):
        prims.append(GaussianPrimitive(
            mean=[rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(2.0, 4.0)],
            orientation=Rotation.random(random_state=int(rng.integers(1 << 30))).as_quat(),
            scale=rng.uniform(0.05, 0.3, size=3),
            opacity=float(rng.uniform(0.2, 0.9)),
            color=rng.uniform(0, 1, size=3),
        ))
    return prims


def plane_map(z=2.0, half=1.5, spacing=0.1, scale=0.08, opacity=0.9, cfg=None):
    ticks = np.arange(-half, half + 1e-9, spacing)
    xs, ys = np.meshgrid(ticks, ticks)
    prims = [GaussianPrimitive([x, y, z], scale=scale, opacity=opacity, color=[0.2 + 0.2 * abs(x), 0.5, 0.3])
             for x, y in zip(xs.ravel(), ys.ravel())]
    return GaussianMap.from_primitives(prims, cfg)


def layered_map(cfg=None):
    """A small plane floating in front of the back plane, for parallax."""
    ticks = np.arange(-0.4, 0.4 + 1e-9, 0.1)
    front = [GaussianPrimitive([x, y, 1.2], scale=0.06, opacity=0.95, color=[0.9, 0.3 + 0.5 * abs(y), 0.1])
             for x in ticks for y in ticks]
    return GaussianMap.from_primitives(plane_map().primitives() + front, cfg)


def precision(g):
    R = Rotation.from_quat(g.orientation).as_matrix()
    return R @ np.diag(g.scale ** -2) @ R.T


def naive_composite(prims, pose, K):
    """Per-pixel compositor over primitives sorted by (camera z, index)."""
    R, t = pose.rotation_matrix, pose.translation
    cam = [(R @ g.mean + t, R @ precision(g) @ R.T) for g in prims]
    order = sorted(range(len(prims)), key=lambda k: (cam[k][0][2], k))
    screen = {k: project_gaussian(pose, prims[k], K) for k in order}
    color = np.zeros((K.height, K.width, 3))
    depth = np.zeros((K.height, K.width))
    alpha = np.zeros((K.height, K.width))
    for v in range(K.height):
        for u in range(K.width):
            r = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            trans = 1.0
            for k in order:
                mu, Q = cam[k]
                t_star = r @ Q @ mu / (r @ Q @ r)
                f = max(mu @ Q @ mu - (r @ Q @ mu) ** 2 / (r @ Q @ r), 0.0)
                a = prims[k].opacity * np.exp(-0.5 * f)
                mu2, cov2 = screen[k]
                d = np.array([u, v]) - mu2
                if t_star <= 1e-6 or a < ALPHA_MIN or d @ np.linalg.solve(cov2, d) > SIGMA_CUTOFF ** 2:
                    continue
                w = a * trans
                color[v, u] += w * prims[k].color
                depth[v, u] += w * t_star
                alpha[v, u] += w
                trans *= 1.0 - a
    return color, depth, alpha


def make_keyframe(kf_id, pose, depth, image=None, fixed=False):
    depth = np.asarray(depth, dtype=np.float64)
    return KeyframeState(kf_id, pose, 1.0 / depth, depth.copy(), image=image, is_pose_fixed=fixed)


class ProjectionTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.default(64, 48, 100.0)

    def test_axis_gaussian_projects_isotropically(self):
        g = GaussianPrimitive([0.0, 0.0, 2.0], scale=0.1)
        mu2, cov2 = project_gaussian(SE3Pose.identity(), g, self.K)
        assert_allclose(mu2, [self.K.cx, self.K.cy], atol=1e-12)
        assert_allclose(cov2, (100.0 * 0.1 / 2.0) ** 2 * np.eye(2), atol=1e-10)

    def test_screen_covariance_is_symmetric_psd(self):
        rng = np.random.default_rng(3)
        pose = exp_map(rng.normal(scale=0.1, size=6))
        for g in random_gaussians(rng, 20):
            _, cov2 = project_gaussian(pose, g, self.K)
            assert_allclose(cov2, cov2.T, atol=1e-12)
            self.assertGreaterEqual(np.linalg.eigvalsh(cov2).min(), -1e-12)

    def test_screen_covariance_matches_sampling(self):
        rng = np.random.default_rng(4)
        g = GaussianPrimitive([0.2, -0.1, 2.0], Rotation.from_euler('xyz', [0.3, -0.2, 0.5]).as_quat(),
                              scale=[0.01, 0.004, 0.007])
        _, cov2 = project_gaussian(SE3Pose.identity(), g, self.K)
        R = Rotation.from_quat(g.orientation).as_matrix()
        samples = g.mean + (rng.standard_normal((200_000, 3)) * g.scale) @ R.T
        uv = np.stack([self.K.fx * samples[:, 0] / samples[:, 2] + self.K.cx,
                       self.K.fy * samples[:, 1] / samples[:, 2] + self.K.cy], axis=1)
        assert_allclose(np.cov(uv.T), cov2, rtol=0.05, atol=0.05 * np.abs(cov2).max())

    def test_behind_camera_is_rejected(self):
        with self.assertRaises(BehindCameraError):
            project_gaussian(SE3Pose.identity(), GaussianPrimitive([0.0, 0.0, -1.0]), self.K)


class UnbiasedDepthTests(unittest.TestCase):

    def test_center_ray_gives_mean_depth(self):
        g = GaussianPrimitive([0.3, -0.2, 2.5], Rotation.from_euler('y', 0.7).as_quat(), scale=[0.3, 0.05, 0.1])
        ray = g.mean / g.mean[2]
        self.assertAlmostEqual(unbiased_depth(ray, g, SE3Pose.identity()), 2.5, places=12)

    def test_isotropic_gaussian_uses_orthogonal_projection(self):
        g = GaussianPrimitive([0.1, 0.05, 3.0], scale=0.2)
        ray = np.array([0.08, -0.02, 1.0])
        expected = (ray @ g.mean) / (ray @ ray)
        self.assertAlmostEqual(unbiased_depth(ray, g, SE3Pose.identity()), expected, places=12)

    def test_tilted_gaussian_matches_line_search(self):
        pose = exp_map([0.05, -0.02, 0.1, 0.02, -0.03, 0.01])
        g = GaussianPrimitive([0.2, 0.1, 2.0], Rotation.from_euler('xyz', [0.6, -0.4, 0.9]).as_quat(),
                              scale=[0.4, 0.05, 0.15])
        ray = np.array([0.12, 0.02, 1.0])
        R = pose.rotation_matrix
        mu = pose.apply(g.mean)
        Q = R @ precision(g) @ R.T
        search = minimize_scalar(lambda t: (t * ray - mu) @ Q @ (t * ray - mu),
                                 bounds=(0.5, 5.0), method='bounded', options={'xatol': 1e-12})
        self.assertAlmostEqual(unbiased_depth(ray, g, pose), search.x * ray[2], delta=1e-6)


class RenderTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.default(9, 9, 10.0)

    def test_opaque_singleton(self):
        gmap = GaussianMap.from_primitives([GaussianPrimitive([0.0, 0.0, 2.0], scale=0.1, opacity=1.0,
                                                              color=[0.9, 0.2, 0.4])])
        out = render(gmap, SE3Pose.identity(), self.K).numpy()
        assert_allclose(out['color'][4, 4], [0.9, 0.2, 0.4], atol=1e-9)
        self.assertAlmostEqual(out['depth'][4, 4], 2.0, places=9)
        self.assertAlmostEqual(out['alpha'][4, 4], 1.0, places=9)

    def test_front_opaque_gaussian_hides_back(self):
        gmap = GaussianMap.from_primitives([
            GaussianPrimitive([0.0, 0.0, 3.0], scale=0.2, opacity=0.8, color=[1.0, 0.0, 0.0]),
            GaussianPrimitive([0.0, 0.0, 2.0], scale=0.2, opacity=1.0, color=[0.0, 0.0, 1.0]),
        ])
        out = render(gmap, SE3Pose.identity(), self.K).numpy()
        assert_allclose(out['color'][4, 4], [0.0, 0.0, 1.0], atol=1e-9)

    def test_empty_pixels_have_zero_alpha(self):
        gmap = GaussianMap.from_primitives([GaussianPrimitive([0.0, 0.0, 2.0], scale=0.01)])
        out = render(gmap, SE3Pose.identity(), self.K).numpy()
        self.assertEqual(out['alpha'][0, 0], 0.0)
        self.assertEqual(out['depth'][0, 0], 0.0)

    def test_matches_naive_compositor(self):
        rng = np.random.default_rng(7)
        K = Intrinsics.default(16, 12, 12.0)
        prims = random_gaussians(rng, 20)
        pose = exp_map([0.02, -0.01, 0.05, 0.01, 0.02, -0.01])
        out = render(GaussianMap.from_primitives(prims), pose, K, tile_size=4).numpy()
        color, depth, alpha = naive_composite(prims, pose, K)
        assert_allclose(out['color'], color, atol=1e-6)
        assert_allclose(out['depth'], depth, atol=1e-6)
        assert_allclose(out['alpha'], alpha, atol=1e-6)
        self.assertLessEqual(out['alpha'].max(), 1.0 + 1e-6)

    def test_render_is_deterministic(self):
        rng = np.random.default_rng(8)
        gmap = GaussianMap.from_primitives(random_gaussians(rng, 30))
        first = render(gmap, SE3Pose.identity(), self.K).numpy()
        second = render(gmap, SE3Pose.identity(), self.K, tile_size=3).numpy()
        assert_allclose(first['color'], second['color'], atol=1e-12)


class NormalTests(unittest.TestCase):

    def test_fronto_parallel_plane(self):
        K = Intrinsics.default(12, 10, 20.0)
        normals, valid = normals_from_depth(np.full(K.shape, 2.0), K)
        self.assertFalse(valid[0].any() or valid[-1].any() or valid[:, 0].any() or valid[:, -1].any())
        self.assertTrue(valid[1:-1, 1:-1].all())
        assert_allclose(normals[valid], np.tile([0.0, 0.0, -1.0], (valid.sum(), 1)), atol=1e-12)

    def test_plane_tilted_about_x(self):
        K = Intrinsics.default(21, 21, 50.0)
        rays = K.rays(K.pixel_grid())
        # plane z = 2 + y
        depth = 2.0 / (1.0 - rays[..., 1])
        normals, valid = normals_from_depth(depth, K)
        expected = np.array([0.0, 1.0, -1.0]) / np.sqrt(2.0)
        assert_allclose(normals[valid], np.tile(expected, (valid.sum(), 1)), atol=1e-3)

    def test_sphere_normals(self):
        K = Intrinsics.default(320, 240, 277.0)
        center, radius = np.array([0.0, 0.0, 3.0]), 1.0
        rays = K.rays(K.pixel_grid())
        a = np.sum(rays ** 2, axis=-1)
        b = -2.0 * rays @ center
        c = center @ center - radius ** 2
        disc = b ** 2 - 4 * a * c
        hit = disc > 0
        t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 0.0)
        normals, valid = normals_from_depth(t, K)
        truth = (t[..., None] * rays - center) / radius
        inside = valid & hit
        inside[1:-1, 1:-1] &= hit[:-2, 1:-1] & hit[2:, 1:-1] & hit[1:-1, :-2] & hit[1:-1, 2:]
        cosine = np.clip(np.sum(normals[inside] * truth[inside], axis=-1), -1, 1)
        self.assertLess(np.degrees(np.median(np.arccos(cosine))), 2.0)


class LossTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.default(12, 10, 10.0)
        self.gmap = plane_map()

    def test_loss_vanishes_on_own_render(self):
        out = render(self.gmap, SE3Pose.identity(), self.K)
        targets = MapTargets(out.color.detach(), out.depth.detach(), out.normal.detach())
        total, terms = compute_loss(out, targets, LossWeights(), self.gmap.scales)
        self.assertAlmostEqual(float(total), 0.0, places=10)
        self.assertAlmostEqual(float(terms['scale']), 0.0, places=12)

    def test_color_gradient_matches_finite_differences(self):
        targets = MapTargets.from_arrays(np.full(self.K.shape + (3,), 0.05), np.full(self.K.shape, 2.5))

        def loss():
            out = render(self.gmap, SE3Pose.identity(), self.K)
            return compute_loss(out, targets, LossWeights(), self.gmap.scales)[0]

        total = loss()
        total.backward()
        k = len(self.gmap) // 2
        analytic = self.gmap.colors.grad[k, 1].item()
        h = 1e-6
        with torch.no_grad():
            self.gmap._colors[k, 1] += h
            plus = loss().item()
            self.gmap._colors[k, 1] -= 2 * h
            minus = loss().item()
        self.assertNotEqual(analytic, 0.0)
        self.assertAlmostEqual(analytic, (plus - minus) / (2 * h), delta=1e-4 * abs(analytic))

    def term_of_offsets(self, name, picked):
        """Loss term as a function of in-plane offsets of a few Gaussians.

        Offsets stay in x and y so the depth order of the plane never changes.
        """
        K = Intrinsics.default(8, 6, 8.0)
        tilted = np.array([0.3, 0.1, -1.0]) / np.linalg.norm([0.3, 0.1, -1.0])
        targets = MapTargets.from_arrays(np.full(K.shape + (3,), 0.05), np.full(K.shape, 2.3),
                                         np.broadcast_to(tilted, K.shape + (3,)))
        base = self.gmap.means.detach().clone()

        def term(offsets):
            self.gmap._means = base.index_add(0, picked, torch.nn.functional.pad(offsets, (0, 1)))
            out = render(self.gmap, SE3Pose.identity(), K)
            return compute_loss(out, targets, LossWeights(), self.gmap.scales)[1][name]
        return term

    def central_gaussians(self, n=4):
        centre = torch.linalg.norm(self.gmap.means.detach()[:, :2] - 0.1, dim=1)
        return torch.argsort(centre)[:n]

    def test_depth_term_passes_gradcheck(self):
        offsets = torch.full((4, 2), 0.01, dtype=torch.float64, requires_grad=True)
        term = self.term_of_offsets('depth', self.central_gaussians())
        self.assertTrue(torch.autograd.gradcheck(term, (offsets,), eps=1e-6, atol=1e-5, rtol=1e-3))

    def test_normal_term_passes_gradcheck(self):
        offsets = torch.full((4, 2), 0.01, dtype=torch.float64, requires_grad=True)
        term = self.term_of_offsets('normal', self.central_gaussians())
        self.assertTrue(torch.autograd.gradcheck(term, (offsets,), eps=1e-6, atol=1e-5, rtol=1e-3))

    def test_color_term_passes_gradcheck(self):
        offsets = torch.full((4, 2), 0.01, dtype=torch.float64, requires_grad=True)
        term = self.term_of_offsets('color', self.central_gaussians())
        self.assertTrue(torch.autograd.gradcheck(term, (offsets,), eps=1e-6, atol=1e-5, rtol=1e-3))

    def test_scale_term_passes_gradcheck(self):
        log_scales = torch.as_tensor(np.random.default_rng(3).normal(-2.0, 0.5, size=(6, 3)),
                                     dtype=torch.float64).requires_grad_()
        out = render(self.gmap, SE3Pose.identity(), self.K)
        targets = MapTargets(out.color.detach(), out.depth.detach())

        def term(log_scales):
            return compute_loss(out, targets, LossWeights(), torch.exp(log_scales))[1]['scale']
        self.assertTrue(torch.autograd.gradcheck(term, (log_scales,), eps=1e-6, atol=1e-5, rtol=1e-3))

    def test_exposure(self):
        rng = np.random.default_rng(5)
        image = rng.uniform(size=(6, 5, 3))
        assert_allclose(apply_exposure(image, ExposureParams()), image)
        assert_allclose(apply_exposure(image, ExposureParams(2 * np.eye(3))), 2 * image)
        planted = ExposureParams(np.eye(3) + rng.normal(scale=0.1, size=(3, 3)), rng.normal(scale=0.05, size=3))
        fitted = fit_exposure(image, apply_exposure(image, planted))
        assert_allclose(fitted.matrix(), planted.matrix(), atol=1e-9)


class MapMaintenanceTests(unittest.TestCase):

    def test_prune_removes_only_faint_primitives(self):
        gmap = GaussianMap.from_primitives([GaussianPrimitive([0, 0, k + 1.0], opacity=o)
                                            for k, o in enumerate([0.5, 0.001, 0.9])])
        gmap.iteration = 149
        self.assertEqual(densify_prune(gmap), 0)
        gmap.iteration = 150
        self.assertEqual(densify_prune(gmap), 1)
        self.assertEqual(gmap.ids.tolist(), [0, 2])

    def test_opacity_reset(self):
        gmap = GaussianMap.from_primitives([GaussianPrimitive([0, 0, 1.0], opacity=0.8)])
        gmap.iteration = 500
        densify_prune(gmap)
        self.assertLessEqual(gmap.opacities.item(), 0.01 + 1e-12)
        self.assertEqual(len(gmap), 1)

    def test_identity_deformation_is_bit_identical(self):
        gmap = GaussianMap.from_primitives(random_gaussians(np.random.default_rng(1), 5))
        before = gmap.state_dict()
        pose = exp_map([0.1, 0.0, 0.2, 0.0, 0.1, 0.0])
        deform_map(gmap, {0: (pose, pose, 1.0)})
        for name in GaussianMap.PARAMS:
            self.assertTrue(torch.equal(before[name], gmap.state_dict()[name]))

    def test_rigid_deformation_keeps_geometry_and_renders(self):
        K = Intrinsics.default(16, 12, 12.0)
        rng = np.random.default_rng(2)
        gmap = GaussianMap.from_primitives(random_gaussians(rng, 12))
        old = exp_map([0.05, 0.02, -0.1, 0.03, -0.02, 0.04])
        new = exp_map([0.1, -0.2, 0.05, 0.2, 0.1, -0.3]).compose(old)
        before = render(gmap, old, K).numpy()
        means = gmap.means.detach().numpy().copy()
        deform_map(gmap, {0: (old, new, 1.0)})
        moved = gmap.means.detach().numpy()
        pairwise = lambda m: np.linalg.norm(m[:, None] - m[None], axis=-1)
        assert_allclose(pairwise(moved), pairwise(means), atol=1e-9)
        after = render(gmap, new, K).numpy()
        assert_allclose(after['color'], before['color'], atol=1e-6)
        assert_allclose(after['depth'], before['depth'], atol=1e-6)

    def test_scale_deformation(self):
        gmap = GaussianMap.from_primitives([GaussianPrimitive([0.2, 0.4, 2.0], scale=0.1)])
        deform_map(gmap, {0: (SE3Pose.identity(), SE3Pose.identity(), 2.0)})
        assert_allclose(gmap.means.detach().numpy(), [[0.1, 0.2, 1.0]], atol=1e-12)
        assert_allclose(gmap.scales.detach().numpy(), [[0.05] * 3], atol=1e-12)

        literal = GaussianMap.from_primitives([GaussianPrimitive([0.2, 0.4, 2.0], scale=0.1)])
        deform_map(literal, {0: (SE3Pose.identity(), SE3Pose.identity(), 2.0)}, literal_scale_update=True)
        assert_allclose(literal.scales.detach().numpy(), [[0.2] * 3], atol=1e-12)

    def test_missing_anchor_is_a_desync(self):
        gmap = GaussianMap.from_primitives([GaussianPrimitive([0, 0, 1.0], anchor_kf=3)])
        with self.assertRaises(MapGraphDesyncError):
            deform_map(gmap, {0: (SE3Pose.identity(), SE3Pose.identity(), 1.0)})


class SeedingTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.default(10, 10, 50.0)
        self.kf = make_keyframe(0, SE3Pose.identity(), np.full((10, 10), 2.0), image=np.full((10, 10, 3), 0.25))

    def test_no_downsampling_keeps_every_pixel(self):
        prims = init_from_keyframe(self.kf, self.K, psi=1)
        self.assertEqual(len(prims), 100)
        self.assertTrue(all(p.opacity == 0.5 for p in prims))
        assert_allclose(prims[0].orientation, [0, 0, 0, 1])

    def test_interior_scale_is_grid_spacing(self):
        prims = init_from_keyframe(self.kf, self.K, psi=1)
        h = 2.0 / 50.0
        scales = np.array([p.scale[0] for p in prims]).reshape(10, 10)
        assert_allclose(scales[1:-1, 1:-1], h, rtol=1e-9)

    def test_downsampling_factor(self):
        prims = init_from_keyframe(self.kf, self.K, psi=4, rng=np.random.default_rng(0))
        self.assertEqual(len(prims), 25)

    def test_sparse_seed_uses_default_scale(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[0, :3] = True
        prims = init_from_keyframe(self.kf, self.K, psi=1, mask=mask, default_scale=0.03)
        self.assertEqual([p.scale[0] for p in prims], [0.03] * 3)


class OptimizationTests(unittest.TestCase):

    def setUp(self):
        self.cfg = MapConfig(stride=1, graph_stride=1)
        self.K = Intrinsics.default(12, 10, 10.0)

    def keyframe_from_render(self, gmap, pose, kf_id=0, K=None):
        with torch.no_grad():
            out = render(gmap, pose, K or self.K, pose_delta=torch.zeros(6, dtype=torch.float64)).numpy()
        return make_keyframe(kf_id, pose, out['depth'], image=out['color'])

    def test_zero_iterations_is_identity(self):
        gmap = plane_map(cfg=self.cfg)
        kf = self.keyframe_from_render(gmap, SE3Pose.identity())
        before = gmap.state_dict()
        self.assertEqual(optimize_map(gmap, [kf], 0, K_map=self.K), [])
        self.assertTrue(torch.equal(before['means'], gmap.means.detach()))

    def test_optimization_reduces_loss(self):
        target = plane_map(cfg=self.cfg)
        kf = self.keyframe_from_render(target, SE3Pose.identity())
        gmap = plane_map(opacity=0.5, cfg=self.cfg)
        with torch.no_grad():
            gmap._colors.fill_(0.5)
        losses = optimize_map(gmap, [kf], 30, K_map=self.K)
        self.assertEqual(len(losses), 30)
        self.assertLess(losses[-1], losses[0])

    def test_refinement_from_perfect_start_does_not_move_poses(self):
        gmap = plane_map(cfg=self.cfg)
        pose = exp_map([0.01, 0.0, 0.0, 0.0, 0.01, 0.0])
        kf = self.keyframe_from_render(gmap, pose)
        weights = LossWeights(lambda_c=1.0, lambda_d=0.0, lambda_n=0.0, lambda_s=0.0)
        result = joint_refine(gmap, [kf], 5, weights, self.K, fit_exposures=False, refine_map=False)
        self.assertEqual(len(result.losses), 5)
        self.assertLess(np.linalg.norm(result.pose_updates[0]), 1e-6)

    def test_refinement_recovers_a_small_yaw(self):
        K = Intrinsics.default(24, 20, 20.0)
        gmap = layered_map(self.cfg)
        kf = self.keyframe_from_render(gmap, SE3Pose.identity(), K=K)
        yaw = Rotation.from_euler('y', 0.5, degrees=True).as_matrix()
        kf.pose = SE3Pose.from_rt(yaw, np.zeros(3))
        weights = LossWeights(lambda_c=1.0, lambda_d=1.0, lambda_n=0.0, lambda_s=0.0)
        result = joint_refine(gmap, [kf], 150, weights, K, pose_lr=2e-3, pose_lr_final=1e-5,
                              fit_exposures=False, refine_map=False)
        self.assertLess(result.losses[-1], result.losses[0])
        residual = Rotation.from_matrix(kf.pose.rotation_matrix).magnitude()
        self.assertLess(np.degrees(residual), 0.15)

    def test_overfits_a_single_view(self):
        target = plane_map(cfg=self.cfg)
        kf = self.keyframe_from_render(target, SE3Pose.identity())
        gmap = plane_map(cfg=self.cfg)
        with torch.no_grad():
            gmap._colors.fill_(0.5)
        weights = LossWeights(lambda_c=1.0, lambda_d=0.0, lambda_n=0.0, lambda_s=0.0)
        optimize_map(gmap, [kf], 300, weights, self.K)
        with torch.no_grad():
            rendered = render(gmap, SE3Pose.identity(), self.K).color.numpy()
        self.assertGreaterEqual(psnr(np.clip(rendered, 0, 1), kf.image), 35.0)


class MapGrowthTests(unittest.TestCase):

    def test_revisiting_keeps_the_map_size_flat(self):
        K = Intrinsics.default(32, 24, 28.0)
        frontend = build_frontend('room', 'revisit', 60, K, NoiseSpec(), seed=0, graph_stride=2)
        mapper = Mapper(frontend.K_full, MapConfig(psi=1, stride=2, graph_stride=2, iters_per_keyframe=2), seed=0)
        for k in range(60):
            mapper.add_keyframe(frontend.gt_keyframe(k))
        sizes = mapper.size_history
        self.assertEqual(len(sizes), 60)
        self.assertGreater(sizes[35], sizes[0])
        self.assertLess(sizes[-1], 1.2 * sizes[35])


class CoverageTests(unittest.TestCase):

    def setUp(self):
        self.K = Intrinsics.default(16, 12, 12.0)
        self.depth = np.full(self.K.shape, 2.0)

    def test_colocated_keyframes_need_nothing(self):
        kfs = [make_keyframe(k, SE3Pose.identity(), self.depth) for k in range(3)]
        self.assertEqual(coverage_analysis(kfs, self.K), [])

    def test_rotation_away_requests_insertion(self):
        turned = SE3Pose.from_rt(Rotation.from_euler('y', np.pi / 2).as_matrix(), np.zeros(3))
        kfs = [make_keyframe(0, SE3Pose.identity(), self.depth), make_keyframe(1, turned, self.depth)]
        requests = coverage_analysis(kfs, self.K)
        self.assertEqual([(r.kf_id, r.neighbour_id) for r in requests], [(0, 1), (1, 0)])
        self.assertGreater(requests[0].outside_fraction, 0.9)

    def test_full_threshold_is_vacuous(self):
        turned = SE3Pose.from_rt(Rotation.from_euler('y', np.pi / 2).as_matrix(), np.zeros(3))
        kfs = [make_keyframe(0, SE3Pose.identity(), self.depth), make_keyframe(1, turned, self.depth)]
        self.assertEqual(coverage_analysis(kfs, self.K, threshold=1.0), [])

    def test_single_keyframe(self):
        self.assertEqual(coverage_analysis([make_keyframe(0, SE3Pose.identity(), self.depth)], self.K), [])


class ExportTests(unittest.TestCase):

    def test_ply_keeps_primitives(self):
        prims = random_gaussians(np.random.default_rng(9), 4)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'map.ply')
            save_ply(path, GaussianMap.from_primitives(prims))
            loaded = load_ply(path).primitives()
        self.assertEqual(len(loaded), 4)
        assert_allclose(loaded[2].mean, prims[2].mean, atol=1e-6)
        assert_allclose(abs(loaded[2].orientation @ prims[2].orientation), 1.0, atol=1e-6)

    def test_ppm_quantizes_to_bytes(self):
        image = np.zeros((3, 4, 3))
        image[1, 2] = [1.0, 0.5, 0.0]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'frame.ppm')
            write_ppm(path, image)
            with open(path, 'rb') as fh:
                self.assertEqual(fh.read(2), b'P6')
            assert_allclose(read_ppm(path)[1, 2], [1.0, 128 / 255, 0.0])
