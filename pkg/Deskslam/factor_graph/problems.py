"""Least-squares problems over a KeyframeGraph, in the shape the solver expects."""
import logging

import numpy as np
from django.conf import settings

from geom.camera import reproject
from geom.lie import adjoint, left_update
from geom.models import SE3Pose, Sim3Pose
from solver.gauss_newton import gauss_newton
from solver.linalg import assemble, reduced_hessian
from solver.models import DampingConfig, FactorBlock

from .residuals import _pixel_list, depth_prior_residual, reprojection_residual

logger = logging.getLogger(__name__)

MIN_INV_DEPTH = 1e-6
MIN_SCALE = 1e-6
POSE_DOF = 6
SIM3_DOF = 7


class _GraphProblem:
    """Shared bookkeeping: column maps, snapshots, depth retraction."""

    def __init__(self, graph, depth_ids, edges):
        self.graph = graph
        self.edges = list(edges)
        self.depth_ids = [i for i in graph.ids if i in set(depth_ids)]
        size = graph.K.width * graph.K.height
        self.depth_offset = {kf_id: n * size for n, kf_id in enumerate(self.depth_ids)}
        self.n_depth = size * len(self.depth_ids)

    def _depth_cols(self, kf_id, pixels):
        if kf_id not in self.depth_offset:
            return np.full(pixels.shape, -1)
        return self.depth_offset[kf_id] + pixels

    def _reprojection_objective(self):
        return sum(reprojection_residual(e, self.graph, jacobians=False).objective() for e in self.edges)

    def _retract_depth(self, dd):
        size = self.graph.K.width * self.graph.K.height
        for kf_id, offset in self.depth_offset.items():
            kf = self.graph.keyframe(kf_id)
            kf.inv_depth = np.maximum(kf.inv_depth + dd[offset:offset + size].reshape(kf.shape), MIN_INV_DEPTH)

    def snapshot(self):
        return {kf.id: (kf.pose, kf.inv_depth.copy(), kf.scale_grid.coefficients.copy())
                for kf in self.graph.keyframes}

    def restore(self, state):
        for kf_id, (pose, inv_depth, coefficients) in state.items():
            kf = self.graph.keyframe(kf_id)
            kf.pose = pose
            kf.inv_depth = inv_depth
            kf.scale_grid.coefficients = coefficients


class BundleAdjustment(_GraphProblem):
    """Reprojection-only BA over free poses and per-pixel inverse depths."""

    def __init__(self, graph, pose_ids, depth_ids, edges):
        super().__init__(graph, depth_ids, edges)
        self.pose_ids = [i for i in graph.ids if i in set(pose_ids) and not graph.keyframe(i).is_pose_fixed]
        self.pose_offset = {kf_id: n * POSE_DOF for n, kf_id in enumerate(self.pose_ids)}
        self.n_primary = POSE_DOF * len(self.pose_ids)

    def _pose_cols(self, kf_id):
        if kf_id not in self.pose_offset:
            return np.full(POSE_DOF, -1)
        return self.pose_offset[kf_id] + np.arange(POSE_DOF)

    def objective(self):
        return self._reprojection_objective()

    def linearize(self):
        blocks = []
        for edge in self.edges:
            t = reprojection_residual(edge, self.graph)
            blocks.append(FactorBlock(
                cols=np.concatenate([self._pose_cols(edge.src), self._pose_cols(edge.dst)]),
                residuals=t.residuals,
                weights=t.weights,
                J_primary=np.concatenate([t.J_src, t.J_dst], axis=2),
                depth_cols=self._depth_cols(edge.src, t.pixels),
                J_depth=t.J_depth,
            ))
        return blocks

    def retract(self, dp, dd):
        for kf_id, offset in self.pose_offset.items():
            kf = self.graph.keyframe(kf_id)
            kf.pose = left_update(kf.pose, dp[offset:offset + POSE_DOF])
        self._retract_depth(dd)

    def reduced_hessian(self):
        return reduced_hessian(assemble(self.linearize(), self.n_primary, self.n_depth))


class DepthScaleAlignment(_GraphProblem):
    """Joint depth and scale alignment: scale grids and depths, poses held constant."""

    def __init__(self, graph, kf_ids, edges, prior_weight=None):
        super().__init__(graph, kf_ids, edges)
        self.prior_weight = settings.PRIOR_WEIGHT if prior_weight is None else prior_weight
        self.grid_offset = {}
        offset = 0
        for kf_id in self.depth_ids:
            self.grid_offset[kf_id] = offset
            offset += graph.keyframe(kf_id).scale_grid.size
        self.n_primary = offset

    def _prior_terms(self):
        return [(kf_id, depth_prior_residual(self.graph.keyframe(kf_id))) for kf_id in self.depth_ids]

    def objective(self):
        prior = sum(t.objective(self.prior_weight) for _, t in self._prior_terms())
        return self._reprojection_objective() + prior

    def linearize(self):
        blocks = []
        for edge in self.edges:
            t = reprojection_residual(edge, self.graph)
            blocks.append(FactorBlock(
                cols=np.zeros(0, dtype=np.int64),
                residuals=t.residuals,
                weights=t.weights,
                J_primary=np.zeros(t.residuals.shape + (0,)),
                depth_cols=self._depth_cols(edge.src, t.pixels),
                J_depth=t.J_depth,
            ))
        for kf_id, t in self._prior_terms():
            size = t.J_grid.shape[1]
            blocks.append(FactorBlock(
                cols=self.grid_offset[kf_id] + np.arange(size),
                residuals=t.residuals,
                weights=self.prior_weight,
                J_primary=t.J_grid[:, None, :],
                depth_cols=self._depth_cols(kf_id, t.pixels),
                J_depth=-np.ones_like(t.residuals),
            ))
        return blocks

    def retract(self, dp, dd):
        for kf_id, offset in self.grid_offset.items():
            grid = self.graph.keyframe(kf_id).scale_grid
            step = dp[offset:offset + grid.size].reshape(grid.shape)
            grid.coefficients = np.maximum(grid.coefficients + step, MIN_SCALE)
        self._retract_depth(dd)


class RelativePoseFit:
    """Pose-only fit of T_ij to one edge's correspondences, depths held fixed.

    Given the reverse edge j->i as well, the relative scale is observable and
    the fit runs over Sim(3); otherwise over SE(3).
    """

    def __init__(self, K, edge, inv_depth, pose_ij=None, reverse=None, reverse_inv_depth=None):
        self.K = K
        self.with_scale = reverse is not None
        self.observations = [(edge, np.asarray(inv_depth), False)]
        if self.with_scale:
            self.observations.append((reverse, np.asarray(reverse_inv_depth), True))
        pose_ij = pose_ij or SE3Pose.identity()
        self.pose = Sim3Pose.from_se3(pose_ij, pose_ij.scale) if self.with_scale else pose_ij
        self.n_primary = SIM3_DOF if self.with_scale else POSE_DOF
        self.n_depth = 0

    @property
    def n_observations(self):
        return sum(edge.n_valid for edge, _, _ in self.observations)

    def _terms(self, edge, inv_depth, inverted, jacobians=True):
        conf = edge.confidences.reshape(-1, 2)
        pixels = np.flatnonzero(np.any(conf > 0, axis=1))
        T = self.pose.inverse() if inverted else self.pose
        out = reproject(T, _pixel_list(self.K)[pixels], inv_depth.reshape(-1)[pixels], self.K, jacobians=jacobians)
        uv, _, front = out[:3]
        residuals = np.where(front[:, None], edge.targets.reshape(-1, 2)[pixels] - uv, 0.0)
        weights = conf[pixels] * front[:, None]
        if not jacobians:
            return residuals, weights, None
        J = np.where(front[:, None, None], out[3], 0.0)
        # T^-1 <- T^-1 exp(-delta) = exp(-Ad(T^-1) delta) T^-1
        J = J @ adjoint(T) if inverted else -J
        return residuals, weights, J

    def objective(self):
        total = 0.0
        for edge, inv_depth, inverted in self.observations:
            r, w, _ = self._terms(edge, inv_depth, inverted, jacobians=False)
            total += float(np.sum(w * r ** 2))
        return total

    def linearize(self):
        blocks = []
        for edge, inv_depth, inverted in self.observations:
            r, w, J = self._terms(edge, inv_depth, inverted)
            blocks.append(FactorBlock(np.arange(self.n_primary), r, w, J))
        return blocks

    def normal_matrix(self):
        """J^T W J and the weighted residual sum of squares at the current pose."""
        blocks = self.linearize()
        H = sum(np.einsum('nmk,nm,nml->kl', b.J_primary, b.weights, b.J_primary) for b in blocks)
        return H, sum(b.objective() for b in blocks)

    def snapshot(self):
        return self.pose

    def restore(self, state):
        self.pose = state

    def retract(self, dp, dd):
        self.pose = left_update(self.pose, dp)


def full_bundle_adjustment(graph, max_iters=None, cfg=None):
    """Offline BA over every keyframe and every edge (active, retired and loop)."""
    problem = BundleAdjustment(graph, graph.ids, graph.ids, graph.edges)
    logger.info("full BA: %d keyframes, %d edges, %d pose dofs", len(graph), len(graph.edges), problem.n_primary)
    return gauss_newton(problem, max_iters, cfg or DampingConfig())
