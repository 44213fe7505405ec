"""Sim(3) pose-graph bundle adjustment.

Relative-pose factors tie consecutive parts of the trajectory together while
dense reprojection factors act only on loop edges. Poses are lifted to Sim(3)
with unit scales for the solve; afterwards each scale is moved out of the
pose into the keyframe's depth map.
"""
import logging

import numpy as np
from django.conf import settings

from Deskslam.exceptions import DegenerateProblemError, DistillationError
from factor_graph.problems import _GraphProblem
from factor_graph.residuals import reprojection_residual
from geom.lie import adjoint, left_jacobian_inverse, left_update, log_map, right_jacobian_inverse
from geom.models import SE3Pose, Sim3Pose
from solver.gauss_newton import gauss_newton
from solver.models import DampingConfig, FactorBlock

from .detection import detect_loops, loop_edges
from .distill import distill_graph, distill_relative_pose
from .models import LoopThresholds, PgbaResult

logger = logging.getLogger(__name__)

SIM3_DOF = 7
# mean loop reprojection error (graph px) above which poses are first aligned by a pose graph
LOOP_INIT_PX = 3.0


def rel_pose_residual(factor, pose_i, pose_j, jacobians=True):
    """r = log(T_ij^-1 T_j T_i^-1) and its Jacobians for left increments of T_i and T_j."""
    r = log_map(factor.rel_pose.inverse().compose(pose_j).compose(pose_i.inverse()))
    if not jacobians:
        return r, None, None
    J_j = left_jacobian_inverse(r) @ adjoint(factor.rel_pose.inverse())
    J_i = -right_jacobian_inverse(r)
    return r, J_i, J_j


class PoseGraphBA(_GraphProblem):
    """Sim(3) poses of every free keyframe and the depths of loop-edge sources."""

    def __init__(self, graph, rel_factors, loop_edges, extra_factors=()):
        super().__init__(graph, {e.src for e in loop_edges}, loop_edges)
        self.rel_factors = list(rel_factors) + list(extra_factors)
        self.pose_ids = [kf.id for kf in graph.keyframes if not kf.is_pose_fixed]
        self.pose_offset = {kf_id: n * SIM3_DOF for n, kf_id in enumerate(self.pose_ids)}
        self.n_primary = SIM3_DOF * len(self.pose_ids)
        self._whiten = [f.sqrt_information for f in self.rel_factors]

    def _pose_cols(self, kf_id):
        if kf_id not in self.pose_offset:
            return np.full(SIM3_DOF, -1)
        return self.pose_offset[kf_id] + np.arange(SIM3_DOF)

    def _rel_terms(self, jacobians=True):
        for factor, U in zip(self.rel_factors, self._whiten):
            pose_i = self.graph.keyframe(factor.i).pose
            pose_j = self.graph.keyframe(factor.j).pose
            r, J_i, J_j = rel_pose_residual(factor, pose_i, pose_j, jacobians)
            yield factor, U @ r, (None if J_i is None else U @ np.hstack([J_i, J_j]))

    def objective(self):
        rel = sum(float(r @ r) for _, r, _ in self._rel_terms(jacobians=False))
        return rel + self._reprojection_objective()

    def linearize(self):
        blocks = []
        for factor, r, J in self._rel_terms():
            blocks.append(FactorBlock(
                cols=np.concatenate([self._pose_cols(factor.i), self._pose_cols(factor.j)]),
                residuals=r[None, :],
                weights=np.ones((1, SIM3_DOF)),
                J_primary=J[None],
            ))
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
            kf.pose = left_update(kf.pose, dp[offset:offset + SIM3_DOF])
        self._retract_depth(dd)


def lift_to_sim3(graph):
    old = {kf.id: kf.pose for kf in graph.keyframes}
    for kf in graph.keyframes:
        kf.pose = Sim3Pose.from_se3(kf.pose)
    return old


def lower_to_se3(graph, old):
    """Sim(3) -> SE(3); depths and scale grids follow the scale. Returns deformation updates."""
    updates, scales = {}, {}
    for kf in graph.keyframes:
        s = kf.pose.scale
        kf.pose = kf.pose.to_se3()
        kf.inv_depth = kf.inv_depth * s
        kf.scale_grid.coefficients = kf.scale_grid.coefficients / s
        scales[kf.id] = s
        updates[kf.id] = (old[kf.id], kf.pose, s)
    return updates, scales


def _mean_loop_error(graph, edges):
    errors = []
    for edge in edges:
        t = reprojection_residual(edge, graph, jacobians=False)
        ok = t.weights[:, 0] > 0
        errors.append(np.linalg.norm(t.residuals[ok], axis=1))
    errors = np.concatenate(errors) if errors else np.zeros(0)
    return float(errors.mean()) if errors.size else 0.0


def _loop_pair_factors(graph, edges, damping):
    """Sim(3) factors for each loop pair, fitted from the identity (loops revisit a viewpoint)."""
    by_key = {e.key: e for e in edges}
    factors = []
    for (i, j), edge in sorted(by_key.items()):
        if (j, i) in by_key and j < i:
            continue
        try:
            factors.append(distill_relative_pose(edge, graph, by_key.get((j, i)), start=SE3Pose.identity(),
                                                 damping=damping))
        except DistillationError as exc:
            logger.warning("loop pair %d-%d not aligned: %s", i, j, exc)
    return factors


def pgba(graph, loop_edges=None, rel_factors=None, max_iters=None, damping=None):
    """Sim(3) PGBA over the whole graph; poses, depths and grids are updated in place.

    `rel_factors` defaults to factors distilled from every non-loop edge at
    the current state. When the loop edges are far from consistent, poses
    are first aligned with a pose graph whose loop pairs carry distilled
    Sim(3) factors.
    """
    loop_edges = graph.loop_edges() if loop_edges is None else list(loop_edges)
    if not loop_edges:
        raise DegenerateProblemError("PGBA needs at least one loop edge")
    max_iters = settings.PGBA_MAX_ITERS if max_iters is None else max_iters
    damping = damping or DampingConfig()
    result = PgbaResult(n_loop_edges=len(loop_edges))
    if rel_factors is None:
        rel_factors, result.dropped = distill_graph(graph, damping=damping)
    result.n_rel_factors = len(rel_factors)

    error = _mean_loop_error(graph, loop_edges)
    old = lift_to_sim3(graph)
    try:
        loop_factors = _loop_pair_factors(graph, loop_edges, damping)
        if loop_factors and error > LOOP_INIT_PX:
            logger.info("PGBA: loop error %.2f px, aligning with %d loop pose factors", error, len(loop_factors))
            result.init_report = gauss_newton(PoseGraphBA(graph, rel_factors, [], loop_factors), max_iters, damping)
        problem = PoseGraphBA(graph, rel_factors, loop_edges, loop_factors)
        result.report = gauss_newton(problem, max_iters, damping)
    finally:
        result.updates, result.scales = lower_to_se3(graph, old)
    if result.report.diverged:
        logger.warning("PGBA diverged; poses left at the last accepted iterate")
    logger.info("PGBA: %d rel factors, %d loop edges, obj %.4e -> %.4e, loop error %.3f -> %.3f px",
                len(rel_factors), len(loop_edges), result.report.initial_objective,
                result.report.final_objective, error, _mean_loop_error(graph, loop_edges))
    return result


def close_loops(graph, frontend, new_id, thresholds=None, max_iters=None, damping=None):
    """Detect loops for a new keyframe, add their edges and run PGBA.

    Returns (candidates, PgbaResult or None when nothing was found).
    """
    new_kf = graph.keyframe(new_id)
    history = [kf for kf in graph.keyframes if kf.id < new_id]
    candidates = detect_loops(new_kf, history, frontend.mean_flow, thresholds or LoopThresholds())
    if not candidates:
        return candidates, None
    known = {e.key for e in graph.loop_edges()}
    for edge in loop_edges(frontend, candidates):
        if edge.key not in known:
            graph.add_edge(edge)
    return candidates, pgba(graph, max_iters=max_iters, damping=damping)
