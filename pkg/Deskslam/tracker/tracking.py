"""Online tracking: keyframe selection, initialisation and the sliding window.

Keyframe ids are frame indices of the simulated sequence. The first two
keyframes anchor the gauge once initialisation is done; inside the local
window the two oldest poses are held so each local solve has a fixed gauge.
"""
import logging
from pathlib import Path

import numpy as np
from scipy.linalg import eigvalsh

from Deskslam.exceptions import DivergenceError, InitializationError
from factor_graph.models import KeyframeGraph
from factor_graph.problems import BundleAdjustment, DepthScaleAlignment, RelativePoseFit
from factor_graph.residuals import grid_field
from geom.camera import reproject
from geom.io import write_tum
from geom.lie import interpolate, relative_pose
from geom.models import SE3Pose
from solver.gauss_newton import gauss_newton
from solver.linalg import assemble, reduced_hessian
from solver.models import ConvergenceReport, DampingConfig

from .models import StepReport, TrackerConfig

logger = logging.getLogger(__name__)

# median depth-induced pixel motion below which depths are unobservable
MIN_DISPARITY = 1e-3
ANCHORS = 2


def select_keyframe(mean_flow, cfg=None):
    """True iff the flow since the last keyframe exceeds d_flow (strictly)."""
    cfg = cfg or TrackerConfig()
    return mean_flow > cfg.d_flow


def match_depth_scale(src, pose_ij, inv_depth, K):
    """Rescale frame j's inverse depth to agree with src's depths seen from j."""
    pixels = K.pixel_grid().reshape(-1, 2)
    uv, z, front = reproject(pose_ij, pixels, src.inv_depth.reshape(-1), K, jacobians=False)
    ok = front & K.contains(uv)
    if not np.any(ok):
        return inv_depth
    rows = np.round(uv[ok, 1]).astype(int)
    cols = np.round(uv[ok, 0]).astype(int)
    return inv_depth * float(np.median((1.0 / z[ok]) / inv_depth[rows, cols]))


def estimate_pose(edge, src, K, iters, damping=None):
    """Pose-only fit of the edge's relative motion; returns T_ij."""
    fit = RelativePoseFit(K, edge, src.inv_depth)
    gauss_newton(fit, iters, damping)
    return fit.pose


def _check_parallax(graph, ids, edges):
    problem = BundleAdjustment(graph, ids[ANCHORS:], ids, edges)
    system = assemble(problem.linearize(), problem.n_primary, problem.n_depth)
    observed = system.C[system.C > 0]
    mean_inv_depth = np.mean([graph.keyframe(i).inv_depth.mean() for i in ids])
    disparity = float(np.median(np.sqrt(observed)) * mean_inv_depth) if observed.size else 0.0
    if disparity < MIN_DISPARITY:
        raise InitializationError(f"insufficient parallax: median depth disparity {disparity:.3e} px")
    S = reduced_hessian(system)
    eig = eigvalsh(0.5 * (S + S.T))
    if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
        raise InitializationError(f"reduced Hessian is rank deficient (smallest eigenvalue {eig[0]:.3e})")


def normalize_scale(graph):
    """Rescale the reconstruction so the mean of all keyframe depths is one."""
    scale = graph.mean_depth()
    for kf in graph.keyframes:
        kf.inv_depth = kf.inv_depth * scale
        kf.scale_grid.coefficients = kf.scale_grid.coefficients / scale
        kf.pose = SE3Pose(kf.pose.rotation, kf.pose.translation / scale)
    return scale


def initialize(frontend, ids, cfg=None, damping=None, report=None):
    """Bootstrap the graph from the first n_init keyframes.

    Poses are chained by pose-only fits from prior depths, the buffer is
    connected by edges within `init_edge_span`, then BA and one JDSA solve
    run before the mean depth is normalised to one.
    """
    cfg = cfg or TrackerConfig()
    damping = damping or DampingConfig()
    ids = list(ids)
    if len(ids) != cfg.n_init:
        raise InitializationError(f"initialisation needs {cfg.n_init} keyframes, got {len(ids)}")
    K = frontend.K
    graph = KeyframeGraph(K, cfg.window)
    prev = graph.add_keyframe(frontend.keyframe(ids[0], SE3Pose.identity(), 1.0 / frontend.prior(ids[0])[0]))
    for k in ids[1:]:
        edge = frontend.edge(prev.id, k)
        if edge is None:
            raise InitializationError(f"keyframes {prev.id} and {k} do not overlap")
        pose_ij = estimate_pose(edge, prev, K, cfg.ba_iters, damping)
        inv_depth = match_depth_scale(prev, pose_ij, 1.0 / frontend.prior(k)[0], K)
        prev = graph.add_keyframe(frontend.keyframe(k, pose_ij.compose(prev.pose), inv_depth))

    for a, i in enumerate(ids):
        for b, j in enumerate(ids):
            if a != b and abs(a - b) <= cfg.init_edge_span:
                edge = frontend.edge(i, j)
                if edge is None:
                    logger.debug("init: no overlap between %d and %d", i, j)
                    continue
                graph.add_edge(edge)
    _check_parallax(graph, ids, graph.edges)

    # the anchor pair is solved on its own, then held fixed like the local BA anchors
    anchors = set(ids[:ANCHORS])
    pair = [e for e in graph.edges if e.src in anchors and e.dst in anchors]
    pair_ba = gauss_newton(BundleAdjustment(graph, ids[1:ANCHORS], ids[:ANCHORS], pair), cfg.init_iters, damping)
    ba = gauss_newton(BundleAdjustment(graph, ids[ANCHORS:], ids, graph.edges), cfg.init_iters, damping)
    jdsa = ConvergenceReport(converged=True)
    if cfg.jdsa:
        jdsa = gauss_newton(DepthScaleAlignment(graph, ids, graph.edges, cfg.prior_weight), cfg.ba_iters, damping)
    scale = normalize_scale(graph)
    for kf in graph.keyframes[:ANCHORS]:
        kf.is_pose_fixed = True
    if report is not None:
        report.ba.extend([pair_ba, ba])
        report.jdsa.append(jdsa)
    if pair_ba.diverged or ba.diverged or jdsa.diverged:
        logger.warning("initialisation solve diverged (pair=%s, ba=%s, jdsa=%s)", pair_ba.diverged, ba.diverged,
                       jdsa.diverged)
    logger.info("initialised %d keyframes, %d edges; BA obj %.3e -> %.3e; depth scale %.4f",
                len(graph), len(graph.edges), ba.initial_objective, ba.final_objective, scale)
    return graph


def _skip(what):
    logger.warning("%s: no edges to solve over; skipped", what)
    return ConvergenceReport(converged=True)


def local_ba_step(graph, new_kf_id, cfg=None, damping=None):
    """Reprojection-only BA over the window; edges leaving it are retired."""
    cfg = cfg or TrackerConfig()
    retired = graph.retire_edges()
    window = graph.window_ids()
    if new_kf_id not in window:
        raise InitializationError(f"keyframe {new_kf_id} is not in the window {window}")
    edges = graph.active_edges()
    if not edges:
        return _skip("local BA")
    problem = BundleAdjustment(graph, window[ANCHORS:], window, edges)
    report = gauss_newton(problem, cfg.ba_iters, damping)
    logger.debug("local BA kf=%d window=%s edges=%d retired=%d obj %.3e -> %.3e",
                 new_kf_id, window, len(edges), retired, report.initial_objective, report.final_objective)
    return report


def jdsa_step(graph, cfg=None, damping=None):
    """Scale grids and window depths against the priors, poses held."""
    cfg = cfg or TrackerConfig()
    edges = graph.active_edges()
    if not edges:
        return _skip("JDSA")
    problem = DepthScaleAlignment(graph, graph.window_ids(), edges, cfg.prior_weight)
    return gauss_newton(problem, cfg.ba_iters, damping)


def insert_keyframe(graph, frontend, kf_id, neighbour_id, cfg=None, damping=None):
    """Offline keyframe halfway between two keyframes, tied to both by retired edges.

    Only the new pose and depths are solved for; returns (keyframe, report).
    """
    cfg = cfg or TrackerConfig()
    K = frontend.K
    a, b = graph.keyframe(kf_id), graph.keyframe(neighbour_id)
    k = frontend.insert_view(kf_id, neighbour_id)
    pose = interpolate(a.pose, b.pose, 0.5)
    guess = 1.0 / (grid_field(a.scale_grid, K.shape) * frontend.prior(k)[0])
    kf = frontend.keyframe(k, pose, match_depth_scale(a, relative_pose(a.pose, pose), guess, K))
    kf.scale_grid = a.scale_grid.copy()
    graph.add_keyframe(kf)
    edges = []
    for other in (kf_id, neighbour_id):
        for src, dst in ((other, k), (k, other)):
            edge = frontend.edge(src, dst)
            if edge is not None:
                edge.active = False
                edges.append(graph.add_edge(edge))
    if not edges:
        return kf, _skip(f"insertion {k}")
    report = gauss_newton(BundleAdjustment(graph, [k], [k], edges), cfg.ba_iters, damping)
    logger.info("inserted keyframe %d between %d and %d (%d edges)", k, kf_id, neighbour_id, len(edges))
    return kf, report


class Tracker:
    """Sequential tracker over a simulated front-end.

    `observe` is fed frame indices in increasing order; frames that pass the
    keyframe test are buffered until initialisation and then tracked into the
    sliding window.
    """

    def __init__(self, frontend, cfg=None, damping=None, dump_traj=None):
        self.frontend = frontend
        self.cfg = cfg or TrackerConfig()
        self.damping = damping or DampingConfig()
        self.dump_traj = Path(dump_traj) if dump_traj else None
        self.graph = None
        self.buffer = []
        self.last_id = None
        self.reports = []

    @property
    def initialized(self):
        return self.graph is not None

    def observe(self, k):
        """Offer frame k; returns True when it became a keyframe."""
        if self.last_id is not None:
            if k <= self.last_id:
                raise InitializationError(f"frame {k} is not after keyframe {self.last_id}")
            if not select_keyframe(self.frontend.mean_flow(self.last_id, k), self.cfg):
                return False
        self.last_id = k
        if self.graph is None:
            self.buffer.append(k)
            if len(self.buffer) == self.cfg.n_init:
                report = StepReport(k)
                self.graph = initialize(self.frontend, self.buffer, self.cfg, self.damping, report)
                self.reports.append(report)
                self._dump()
            return True
        self.reports.append(self.add_keyframe(k))
        self._dump()
        return True

    def add_keyframe(self, k):
        graph, K, cfg = self.graph, self.frontend.K, self.cfg
        prev = graph.keyframes[-1]
        edge = self.frontend.edge(prev.id, k)
        if edge is None:
            raise DivergenceError(f"tracking lost: keyframe {k} does not overlap keyframe {prev.id}")
        pose_ij = estimate_pose(edge, prev, K, cfg.ba_iters, self.damping)
        guess = 1.0 / (grid_field(prev.scale_grid, K.shape) * self.frontend.prior(k)[0])
        kf = self.frontend.keyframe(k, pose_ij.compose(prev.pose), match_depth_scale(prev, pose_ij, guess, K))
        kf.scale_grid = prev.scale_grid.copy()
        graph.add_keyframe(kf)
        for other in graph.window_ids()[:-1]:
            if other != prev.id and self.frontend.mean_flow(other, k) >= cfg.overlap_flow:
                continue
            for src, dst in ((other, k), (k, other)):
                new_edge = self.frontend.edge(src, dst)
                if new_edge is not None:
                    graph.add_edge(new_edge)
        report = StepReport(k)
        for _ in range(cfg.ba_jdsa_interleave):
            report.ba.append(local_ba_step(graph, k, cfg, self.damping))
            if cfg.jdsa:
                report.jdsa.append(jdsa_step(graph, cfg, self.damping))
        if report.diverged:
            logger.warning("keyframe %d: window solve diverged", k)
        return report

    def run(self, frames=None):
        frames = range(len(self.frontend)) if frames is None else frames
        for k in frames:
            self.observe(k)
        if not self.initialized:
            raise InitializationError(f"only {len(self.buffer)} keyframes selected; {self.cfg.n_init} needed")
        return self.graph

    def trajectory(self):
        if self.graph is None:
            return [], []
        return self.graph.ids, self.graph.poses()

    def _dump(self):
        if self.dump_traj is not None:
            write_tum(self.dump_traj, *self.trajectory())
