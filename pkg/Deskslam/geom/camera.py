import numpy as np

from Deskslam.exceptions import BehindCameraError, InvalidDepthError

from .lie import point_jacobian
from .models import Sim3Pose

EPS_Z = 1e-6


def project(pose, point, K):
    """Pixel of a world point seen from a world->camera pose."""
    p = pose.apply(np.asarray(point, dtype=np.float64).reshape(3))
    if p[2] <= EPS_Z:
        raise BehindCameraError(p[2])
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def backproject(pixel, inverse_depth, K):
    if not inverse_depth > 0:
        raise InvalidDepthError(f"inverse depth must be positive, got {inverse_depth}")
    return K.rays(np.asarray(pixel, dtype=np.float64)) / inverse_depth


def project_points(points, K):
    """Vectorised pinhole projection of camera-frame points; returns (uv, z, valid)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > EPS_Z
    zs = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * points[..., 0] / zs + K.cx, K.fy * points[..., 1] / zs + K.cy], axis=-1)
    return uv, z, valid


def projection_jacobian(points, K):
    """d(uv)/d(point) for (N, 3) camera-frame points -> (N, 2, 3)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    z = np.where(np.abs(z) > EPS_Z, z, EPS_Z)
    J = np.zeros((points.shape[0], 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    return J


def reproject(pose_ij, pixels, inverse_depth, K, jacobians=True):
    """Warp pixels of frame i with inverse depth into frame j.

    Returns uv (N, 2), z (N,), valid (N,) and, when asked, the Jacobians of uv
    w.r.t. a left increment of pose_ij (N, 2, 6|7) and w.r.t. the inverse
    depth (N, 2).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    inverse_depth = np.asarray(inverse_depth, dtype=np.float64).reshape(-1)
    rays = K.rays(pixels)
    X = rays / inverse_depth[:, None]
    Y = pose_ij.apply(X)
    uv, z, valid = project_points(Y, K)
    if not jacobians:
        return uv, z, valid
    Jp = projection_jacobian(Y, K)
    J_pose = Jp @ point_jacobian(Y, with_scale=isinstance(pose_ij, Sim3Pose))
    sR = pose_ij.scale * pose_ij.rotation_matrix
    dY_dd = -(rays @ sR.T) / inverse_depth[:, None] ** 2
    J_depth = np.einsum('nij,nj->ni', Jp, dY_dd)
    return uv, z, valid, J_pose, J_depth
