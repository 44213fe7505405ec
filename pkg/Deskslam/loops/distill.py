"""Relative poses and their covariances from inactive reprojection edges.

The fit minimises the reprojection objective over T_ij alone. Following
adjustment theory, the covariance is the variance of unit weight
r^T W r / (n - u) times (J^T W J)^-1, both taken at the final iterate.
"""
import logging

import numpy as np
from django.conf import settings
from scipy.linalg import eigvalsh

from Deskslam.exceptions import DistillationError
from factor_graph.problems import RelativePoseFit
from geom.lie import adjoint, relative_pose
from geom.models import Sim3Pose
from solver.gauss_newton import gauss_newton

from .models import RelPoseFactor

logger = logging.getLogger(__name__)

# prior variance on log-scale when only one direction is observed
SCALE_VARIANCE = 1.0
RANK_TOL = 1e-12
FIT_ITERS = 30


def distill_relative_pose(edge, graph, reverse=None, start=None, damping=None, iters=FIT_ITERS):
    """RelPoseFactor for edge.src -> edge.dst using the graph's current depths.

    With the reverse edge the relative scale is estimated as well; otherwise
    the SE(3) fit is embedded in Sim(3) with a weak scale variance.
    """
    min_obs = settings.MIN_DISTILL_CORRESPONDENCES
    n_valid = edge.n_valid + (reverse.n_valid if reverse is not None else 0)
    if edge.n_valid < min_obs:
        raise DistillationError(f"edge {edge.src}->{edge.dst}: {edge.n_valid} correspondences, need {min_obs}")
    src, dst = graph.keyframe(edge.src), graph.keyframe(edge.dst)
    if start is None:
        start = relative_pose(src.pose, dst.pose)
    fit = RelativePoseFit(graph.K, edge, src.inv_depth, start, reverse,
                          dst.inv_depth if reverse is not None else None)
    gauss_newton(fit, iters, damping)

    H, ssr = fit.normal_matrix()
    eig = eigvalsh(0.5 * (H + H.T))
    if eig[0] <= RANK_TOL * max(eig[-1], 1e-300):
        raise DistillationError(f"edge {edge.src}->{edge.dst}: normal matrix is rank deficient")
    n_rows = 2 * n_valid
    dof = fit.n_primary
    variance_factor = ssr / (n_rows - dof)
    cov = variance_factor * np.linalg.inv(H)
    if dof == 6:
        embedded = np.zeros((7, 7))
        embedded[:6, :6] = cov
        embedded[6, 6] = SCALE_VARIANCE
        cov = embedded
    rel = fit.pose if isinstance(fit.pose, Sim3Pose) else Sim3Pose.from_se3(fit.pose)
    # left perturbation of the fit -> tangent of log(rel^-1 T)
    Ad = adjoint(rel.inverse())
    cov = Ad @ cov @ Ad.T
    cov = 0.5 * (cov + cov.T)
    logger.debug("distilled %d->%d: n=%d sigma0^2=%.3e scale=%.5f", edge.src, edge.dst, n_valid,
                 variance_factor, rel.scale)
    return RelPoseFactor(edge.src, edge.dst, rel, cov, n_valid, float(variance_factor))


def distill_graph(graph, edges=None, damping=None):
    """One factor per unordered keyframe pair of the non-loop edges.

    Pairs whose distillation fails are dropped; returns (factors, dropped).
    """
    edges = [e for e in (graph.edges if edges is None else edges) if not e.loop]
    by_key = {}
    for e in edges:
        by_key.setdefault(e.key, e)
    factors, dropped = [], []
    for (i, j), edge in sorted(by_key.items()):
        if (j, i) in by_key and j < i:
            continue
        try:
            factors.append(distill_relative_pose(edge, graph, by_key.get((j, i)), damping=damping))
        except DistillationError as exc:
            logger.warning("dropping edge %d->%d: %s", i, j, exc)
            dropped.append((i, j))
    return factors, dropped
