import logging

from geom.lie import relative_pose, rotation_angle

from .models import LoopCandidate, LoopThresholds

logger = logging.getLogger(__name__)


def detect_loops(new_kf, history, flow_fn, thresholds=None):
    """Earlier keyframes that close a loop with `new_kf`.

    `history` is the keyframe buffer before `new_kf`, oldest first; the
    temporal gap is counted in buffer positions. `flow_fn(i, j)` returns the
    mean flow distance between two keyframes. A candidate passes when its
    flow distance is below tau_flow, its orientation change below tau_ori
    and its gap above tau_temp.
    """
    thresholds = thresholds or LoopThresholds()
    history = list(history)
    candidates = []
    for position, old in enumerate(history):
        gap = len(history) - position
        if gap <= thresholds.tau_temp:
            break
        dori = rotation_angle(relative_pose(old.pose, new_kf.pose))
        if dori >= thresholds.tau_ori:
            continue
        d_of = flow_fn(old.id, new_kf.id)
        if d_of >= thresholds.tau_flow:
            continue
        logger.info("LOOP i=%d j=%d d_of=%.3f dori=%.3f", old.id, new_kf.id, d_of, dori)
        candidates.append(LoopCandidate(old.id, new_kf.id, float(d_of), dori))
    return candidates


def loop_edges(frontend, candidates):
    """Forward and reverse reprojection edges for each candidate pair."""
    edges = []
    for c in candidates:
        for src, dst in ((c.j, c.i), (c.i, c.j)):
            edge = frontend.edge(src, dst, loop=True)
            if edge is None:
                logger.warning("loop %d-%d: no correspondences for %d->%d", c.i, c.j, src, dst)
                continue
            edges.append(edge)
    return edges
