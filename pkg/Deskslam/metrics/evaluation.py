"""Trajectory, depth and image metrics."""
import logging

import numpy as np

from Deskslam.exceptions import ConfigurationError, EmptyMaskError, InsufficientDataError, ShapeMismatchError

from .models import Alignment, DepthMetrics

logger = logging.getLogger(__name__)

ALIGNMENTS = ('se3', 'sim3')
MIN_POSES = 3


def umeyama(source, target, with_scale=True):
    """Closed-form similarity (or rigid) transform taking `source` points onto `target`."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    xs, xt = source - mu_s, target - mu_t
    U, d, Vt = np.linalg.svd(xt.T @ xs / len(source))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if with_scale:
        var = np.mean(np.sum(xs ** 2, axis=1))
        scale = float(np.trace(np.diag(d) @ S) / var) if var > 0 else 1.0
    return Alignment(R, mu_t - scale * R @ mu_s, scale)


def _associate(est, gt):
    """Pair poses by keyframe id when given mappings, by position otherwise."""
    if isinstance(est, dict) and isinstance(gt, dict):
        ids = sorted(set(est) & set(gt))
        return [est[i] for i in ids], [gt[i] for i in ids]
    if len(est) != len(gt):
        raise ShapeMismatchError(f"{len(est)} estimated poses vs {len(gt)} ground-truth poses")
    return list(est), list(gt)


def ate(est, gt, alignment='sim3'):
    """Translational RMSE of camera centres after closed-form alignment.

    Poses are world->camera; `est` and `gt` are id->pose mappings or
    equally long sequences.
    """
    if alignment not in ALIGNMENTS:
        raise ConfigurationError(f"unknown alignment {alignment!r}; expected one of {ALIGNMENTS}")
    est, gt = _associate(est, gt)
    if len(est) < MIN_POSES:
        raise InsufficientDataError(f"ATE needs at least {MIN_POSES} associated poses, got {len(est)}")
    est_c = np.array([p.center() for p in est])
    gt_c = np.array([p.center() for p in gt])
    transform = umeyama(est_c, gt_c, with_scale=alignment == 'sim3')
    errors = np.linalg.norm(transform.apply(est_c) - gt_c, axis=1)
    return float(np.sqrt(np.mean(errors ** 2)))


def depth_metrics(est, gt, mask=None):
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ShapeMismatchError(f"depth maps {est.shape} vs {gt.shape}")
    valid = (gt > 0) & (est > 0) & np.isfinite(est)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ShapeMismatchError(f"mask {mask.shape} vs depth {gt.shape}")
        valid &= mask
    if not np.any(valid):
        raise EmptyMaskError("no valid pixels to evaluate")
    e, g = est[valid], gt[valid]
    diff = e - g
    ratio = np.maximum(e / g, g / e)
    return DepthMetrics(
        abs_diff=float(np.mean(np.abs(diff))),
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        delta_105=float(np.mean(ratio < 1.05)),
        delta_125=float(np.mean(ratio < 1.25)),
    )


def psnr(image, reference):
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give inf."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ShapeMismatchError(f"image {image.shape} vs reference {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return float('inf')
    return float(10.0 * np.log10(1.0 / mse))
