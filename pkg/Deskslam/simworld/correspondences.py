"""Dense correspondences, depth priors and the simulated front-end."""
import logging

import numpy as np
from django.conf import settings

from factor_graph.models import KeyframeState, ScaleGrid
from factor_graph.residuals import grid_field
from geom.camera import project_points
from geom.lie import interpolate

from .models import Correspondences, NoiseSpec
from .noise import generator
from .scenes import render_gt

logger = logging.getLogger(__name__)

MIN_COVISIBILITY = 0.05
# relative depth tolerance of the occlusion test (nearest-pixel lookup)
OCCLUSION_TOL = 0.02


def covisible(depth_i, pose_i, pose_j, K, depth_j):
    """Pixels of frame i whose surface point is the first hit seen from frame j.

    Returns (mask, uv_j) where uv_j are the exact projections into frame j.
    """
    rays = K.rays(K.pixel_grid())
    points = pose_i.inverse().apply(rays * depth_i[..., None])
    uv, z, front = project_points(pose_j.apply(points), K)
    inside = front & K.contains(uv) & (depth_i > 0)
    rows = np.clip(np.round(uv[..., 1]).astype(int), 0, K.height - 1)
    cols = np.clip(np.round(uv[..., 0]).astype(int), 0, K.width - 1)
    seen = depth_j[rows, cols]
    visible = inside & (seen > 0) & (np.abs(seen - z) <= OCCLUSION_TOL * z)
    return visible, uv


def warp(depth_i, pose_ij, K):
    rays = K.rays(K.pixel_grid())
    uv, _, _ = project_points(pose_ij.apply(rays * depth_i[..., None]), K)
    return uv


def gen_correspondences(scene, pose_i, pose_j, K, noise=None, rng=None, *, depth_i=None, depth_j=None,
                        warp_pose=None, warp_depth=None):
    """Noisy dense targets from frame i into frame j.

    Visibility always follows the ground-truth geometry. Targets follow
    `warp_pose` applied to `warp_depth` when given (drifted odometry), the
    exact projections otherwise.
    """
    noise = noise or NoiseSpec()
    rng = rng if rng is not None else generator(0)
    depth_i = render_gt(scene, pose_i, K).depth if depth_i is None else depth_i
    depth_j = render_gt(scene, pose_j, K).depth if depth_j is None else depth_j
    visible, uv = covisible(depth_i, pose_i, pose_j, K, depth_j)
    if warp_pose is not None:
        uv = warp(depth_i if warp_depth is None else warp_depth, warp_pose, K)
    covisibility = float(visible.mean())
    if covisibility < MIN_COVISIBILITY:
        logger.debug("co-visibility %.3f below %.2f; empty edge", covisibility, MIN_COVISIBILITY)
        zeros = np.zeros(K.shape + (2,))
        return Correspondences(zeros, zeros.copy(), covisibility, float('inf'))
    pixels = K.pixel_grid()
    flow = np.linalg.norm(uv - pixels, axis=-1)
    mean_flow = float(flow[visible].mean())
    targets = uv + noise.flow_sigma * rng.standard_normal(uv.shape) if noise.flow_sigma > 0 else uv
    targets = np.where(visible[..., None], targets, pixels)
    confidence = 1.0 / (1.0 + noise.flow_sigma ** 2)
    confidences = np.where(visible[..., None], confidence, 0.0) * np.ones(2)
    return Correspondences(targets, confidences, covisibility, mean_flow)


def prior_field(corners, shape, smooth=True):
    corners = np.asarray(corners, dtype=np.float64).reshape(2, 2)
    if not smooth:
        return np.full(shape, corners[0, 0])
    return grid_field(ScaleGrid(corners), shape)


def gen_depth_prior(gt_depth, noise=None, rng=None, corners=None):
    """prior = gt / bilinear(corners) * (1 + relative noise); returns (prior, corners).

    The corners are the scale grid that maps the prior back onto gt.
    """
    noise = noise or NoiseSpec()
    rng = rng if rng is not None else generator(0)
    if corners is None:
        if noise.prior_corners is not None:
            corners = np.asarray(noise.prior_corners, dtype=np.float64)
        else:
            corners = rng.uniform(*noise.corner_range, size=(2, 2))
    corners = np.asarray(corners, dtype=np.float64).reshape(2, 2)
    prior = gt_depth / prior_field(corners, gt_depth.shape, noise.smooth_field)
    if noise.prior_noise_sigma > 0:
        prior = prior * np.clip(1.0 + noise.prior_noise_sigma * rng.standard_normal(gt_depth.shape), 0.05, None)
    return prior, corners


class SimulatedFrontend:
    """Stands in for the learned networks: flow, confidences and depth priors.

    Local edges are consistent with the drifted odometry (depths scaled by
    the local drift scale); loop edges follow the ground truth. All noise is
    drawn from generators keyed on (seed, ids) so results do not depend on
    call order.
    """

    def __init__(self, scene, trajectory, K_full, noise=None, seed=None, graph_stride=None):
        self.scene = scene
        self.trajectory = trajectory
        self.noise = noise or NoiseSpec()
        self.seed = settings.SEED if seed is None else seed
        self.K_full = K_full
        self.graph_stride = graph_stride or settings.GRAPH_STRIDE
        self.K = K_full.downsample(self.graph_stride)
        self._gt = {}
        self._full = {}
        self._priors = {}

    def __len__(self):
        return len(self.trajectory)

    def gt(self, k):
        if k not in self._gt:
            self._gt[k] = render_gt(self.scene, self.trajectory.gt[k], self.K)
        return self._gt[k]

    def full(self, k):
        if k not in self._full:
            self._full[k] = render_gt(self.scene, self.trajectory.gt[k], self.K_full)
        return self._full[k]

    def prior(self, k):
        """Prior depth on the graph grid and its planted corners."""
        if k not in self._priors:
            self._priors[k] = gen_depth_prior(self.gt(k).depth, self.noise, generator(self.seed, k, 0x7072))
        return self._priors[k]

    def edge(self, i, j, loop=False):
        traj = self.trajectory
        kwargs = {}
        if not loop:
            kwargs = {'warp_pose': traj.drifted[j].compose(traj.drifted[i].inverse()),
                      'warp_depth': self.gt(i).depth * traj.drift_scales[i]}
        corr = gen_correspondences(self.scene, traj.gt[i], traj.gt[j], self.K, self.noise,
                                   generator(self.seed, i, j, int(loop)), depth_i=self.gt(i).depth,
                                   depth_j=self.gt(j).depth, **kwargs)
        if corr.empty:
            return None
        return corr.to_edge(i, j, loop=loop)

    def mean_flow(self, i, j):
        """Noise-free mean flow between two keyframes in full-resolution pixels (inf without overlap)."""
        visible, uv = covisible(self.gt(i).depth, self.trajectory.gt[i], self.trajectory.gt[j],
                                self.K, self.gt(j).depth)
        if visible.mean() < MIN_COVISIBILITY:
            return float('inf')
        flow = np.linalg.norm(uv - self.K.pixel_grid(), axis=-1)[visible].mean()
        return float(flow * self.graph_stride)

    def insert_view(self, i, j):
        """Append a frame halfway between frames i and j; returns its index."""
        traj = self.trajectory
        traj.gt.append(interpolate(traj.gt[i], traj.gt[j], 0.5))
        traj.drifted.append(interpolate(traj.drifted[i], traj.drifted[j], 0.5))
        traj.drift_scales = np.append(traj.drift_scales, np.sqrt(traj.drift_scales[i] * traj.drift_scales[j]))
        logger.debug("inserted frame %d between %d and %d", len(traj) - 1, i, j)
        return len(traj) - 1

    def keyframe(self, k, pose, inv_depth):
        """KeyframeState for index k at the given initial estimate."""
        prior, _ = self.prior(k)
        full = self.full(k)
        grid = ScaleGrid.ones(settings.SCALE_GRID_ROWS, settings.SCALE_GRID_COLS)
        return KeyframeState(k, pose, inv_depth, prior, grid, image=full.color, normal_prior=full.normals)

    def gt_keyframe(self, k):
        """KeyframeState at the ground-truth pose and depth."""
        return self.keyframe(k, self.trajectory.gt[k], 1.0 / self.gt(k).depth)
