import logging
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from geom.camera import project_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InsertionRequest:
    kf_id: int
    neighbour_id: int
    outside_fraction: float


def outside_fraction(kf, others, K):
    """Fraction of kf's pixels that no keyframe in `others` sees."""
    pixels = K.pixel_grid().reshape(-1, 2)
    points = kf.pose.inverse().apply(K.rays(pixels) / kf.inv_depth.reshape(-1)[:, None])
    seen = np.zeros(len(points), dtype=bool)
    for other in others:
        uv, _, front = project_points(other.pose.apply(points), K)
        seen |= front & K.contains(uv)
    return float(1.0 - seen.mean())


def coverage_analysis(keyframes, K, threshold=None):
    """Flag keyframes whose view is poorly covered by their temporal neighbours.

    Each request names the neighbour with the least overlap; the new keyframe
    goes between the two.
    """
    threshold = settings.COVERAGE_THRESHOLD if threshold is None else threshold
    requests = []
    if len(keyframes) < 2:
        return requests
    for n, kf in enumerate(keyframes):
        neighbours = [keyframes[m] for m in (n - 1, n + 1) if 0 <= m < len(keyframes)]
        fraction = outside_fraction(kf, neighbours, K)
        if fraction > threshold:
            worst = max(neighbours, key=lambda other: outside_fraction(kf, [other], K))
            requests.append(InsertionRequest(kf.id, worst.id, fraction))
            logger.info("coverage: kf %d has %.1f%% of pixels outside its neighbours (insert towards %d)",
                        kf.id, 100 * fraction, worst.id)
    return requests
