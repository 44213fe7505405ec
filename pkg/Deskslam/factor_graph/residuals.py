"""Reprojection and depth-prior residuals with their Jacobians.

Residual Jacobians are taken w.r.t. left increments of the world->camera
poses, the per-pixel inverse depths of the source keyframe, and the
coefficients of the source keyframe's scale grid.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from Deskslam.exceptions import DomainError
from geom.camera import reproject
from geom.lie import adjoint, relative_pose


def bilinear_weights(pixels, grid_shape, image_size):
    """Corner-anchored bilinear weights of an (m, n) grid over a (W, H) image.

    Returns flat coefficient indices (N, 4) and weights (N, 4).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    rows, cols = grid_shape
    width, height = image_size
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any((u < 0) | (u > width - 1) | (v < 0) | (v > height - 1)):
        raise DomainError(f"pixel outside the {width}x{height} image")
    gx = u / max(width - 1, 1) * (cols - 1)
    gy = v / max(height - 1, 1) * (rows - 1)
    c0 = np.clip(np.floor(gx).astype(int), 0, max(cols - 2, 0))
    r0 = np.clip(np.floor(gy).astype(int), 0, max(rows - 2, 0))
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    fx = gx - c0
    fy = gy - r0
    idx = np.stack([r0 * cols + c0, r0 * cols + c1, r1 * cols + c0, r1 * cols + c1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def bilinear_scale(pixel, grid, image_size):
    idx, w = bilinear_weights(pixel, grid.shape, image_size)
    return float(np.sum(grid.coefficients.reshape(-1)[idx[0]] * w[0]))


@lru_cache(maxsize=16)
def _interpolation_matrix(shape, grid_shape):
    height, width = shape
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    idx, w = bilinear_weights(np.stack([u.ravel(), v.ravel()], axis=1), grid_shape, (width, height))
    M = np.zeros((height * width, grid_shape[0] * grid_shape[1]))
    np.add.at(M, (np.arange(height * width)[:, None], idx), w)
    M.setflags(write=False)
    return M


def grid_field(grid, shape):
    """Dense (H, W) field Bi(p, s) for every pixel of an image of `shape`."""
    M = _interpolation_matrix(tuple(shape), tuple(grid.shape))
    return (M @ grid.coefficients.reshape(-1)).reshape(shape)


@lru_cache(maxsize=16)
def _pixel_list(K):
    pix = K.pixel_grid().reshape(-1, 2)
    pix.setflags(write=False)
    return pix


@dataclass
class ReprojectionTerms:
    residuals: np.ndarray   # (N, 2)
    weights: np.ndarray     # (N, 2)
    J_src: np.ndarray       # (N, 2, k)
    J_dst: np.ndarray       # (N, 2, k)
    J_depth: np.ndarray     # (N, 2)
    pixels: np.ndarray      # (N,) flat indices into the source depth grid

    def objective(self):
        return float(np.sum(self.weights * self.residuals ** 2))


def reprojection_residual(edge, graph, jacobians=True):
    """r = target - Pi(T_ij Pi^-1(p, d)); pixels behind the target camera get weight 0."""
    src = graph.keyframe(edge.src)
    dst = graph.keyframe(edge.dst)
    T_ij = relative_pose(src.pose, dst.pose)
    conf = edge.confidences.reshape(-1, 2)
    pixels = np.flatnonzero(np.any(conf > 0, axis=1))
    uvs = _pixel_list(graph.K)[pixels]
    d = src.inv_depth.reshape(-1)[pixels]
    targets = edge.targets.reshape(-1, 2)[pixels]
    out = reproject(T_ij, uvs, d, graph.K, jacobians=jacobians)
    uv, _, front = out[:3]
    residuals = np.where(front[:, None], targets - uv, 0.0)
    weights = conf[pixels] * front[:, None]
    if not jacobians:
        return ReprojectionTerms(residuals, weights, None, None, None, pixels)
    J_pose, J_d = out[3], out[4]
    J_pose = np.where(front[:, None, None], J_pose, 0.0)
    J_d = np.where(front[:, None], J_d, 0.0)
    # T_ij <- exp(delta_j) T_ij  and  T_ij <- exp(-Ad(T_ij) delta_i) T_ij
    J_dst = -J_pose
    J_src = J_pose @ adjoint(T_ij)
    return ReprojectionTerms(residuals, weights, J_src, J_dst, -J_d, pixels)


@dataclass
class PriorTerms:
    residuals: np.ndarray       # (N,)
    J_grid: np.ndarray          # (N, m*n)
    pixels: np.ndarray          # (N,)

    def objective(self, weight=1.0):
        return float(weight * np.sum(self.residuals ** 2))


def depth_prior_residual(kf):
    """r = prior_inv_depth / Bi(p, s) - inv_depth; dr/d(inv_depth) = -1."""
    M = _interpolation_matrix(kf.shape, kf.scale_grid.shape)
    prior = kf.prior_inv_depth.reshape(-1)
    field = M @ kf.scale_grid.coefficients.reshape(-1)
    aligned = prior / field
    residuals = aligned - kf.inv_depth.reshape(-1)
    return PriorTerms(residuals, -(aligned / field)[:, None] * M, np.arange(residuals.size))
