"""Exponential/logarithm maps, adjoints and Jacobians for SE(3) and Sim(3).

Twists are laid out as [v, w] for SE(3) and [v, w, sigma] for Sim(3), with
sigma = ln(scale). Increments are applied on the left: T <- exp(delta) * T.
"""
import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import BranchAmbiguityError

from .models import SE3Pose, Sim3Pose

SMALL_ANGLE = 1e-5
BRANCH_GUARD = 1e-6


def hat(w):
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def batch_hat(w):
    """(N, 3) -> (N, 3, 3) skew matrices."""
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_left_jacobian(w):
    """V(w) = I + (1-cos t)/t^2 W + (t - sin t)/t^3 W^2."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        a, b = 0.5 - theta ** 2 / 24.0, 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta ** 2
        b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * W + b * (W @ W)


def sim3_w_matrix(w, sigma):
    """Integral of exp(u*(sigma*I + hat(w))) over u in [0, 1]."""
    M = np.zeros((6, 6))
    M[:3, :3] = sigma * np.eye(3) + hat(w)
    M[:3, 3:] = np.eye(3)
    return expm(M)[:3, 3:]


def _check_twist(xi):
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    if xi.size not in (6, 7):
        raise ValueError(f"twist must have 6 or 7 components, got {xi.size}")
    return xi


def exp_map(xi):
    xi = _check_twist(xi)
    v, w = xi[:3], xi[3:6]
    q = Rotation.from_rotvec(w).as_quat()
    if xi.size == 6:
        return SE3Pose(q, so3_left_jacobian(w) @ v)
    sigma = xi[6]
    return Sim3Pose(q, sim3_w_matrix(w, sigma) @ v, np.exp(sigma))


def log_map(pose):
    w = Rotation.from_quat(pose.rotation).as_rotvec()
    theta = np.linalg.norm(w)
    if theta > np.pi - BRANCH_GUARD:
        raise BranchAmbiguityError(f"rotation angle {theta:.9f} is on the log branch cut")
    if isinstance(pose, Sim3Pose):
        sigma = np.log(pose.scale)
        v = np.linalg.solve(sim3_w_matrix(w, sigma), pose.translation)
        return np.concatenate([v, w, [sigma]])
    v = np.linalg.solve(so3_left_jacobian(w), pose.translation)
    return np.concatenate([v, w])


def left_update(pose, delta):
    """exp(delta) * pose."""
    return exp_map(delta).compose(pose)


def adjoint(pose):
    R = pose.rotation_matrix
    t = pose.translation
    if isinstance(pose, Sim3Pose):
        Ad = np.zeros((7, 7))
        Ad[:3, :3] = pose.scale * R
        Ad[:3, 3:6] = hat(t) @ R
        Ad[:3, 6] = -t
        Ad[3:6, 3:6] = R
        Ad[6, 6] = 1.0
        return Ad
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[:3, 3:] = hat(t) @ R
    Ad[3:, 3:] = R
    return Ad


def ad(xi):
    """Lie-bracket matrix: ad(a) b = [a, b]."""
    xi = _check_twist(xi)
    v, w = xi[:3], xi[3:6]
    n = xi.size
    out = np.zeros((n, n))
    out[:3, :3] = hat(w)
    out[:3, 3:6] = hat(v)
    out[3:6, 3:6] = hat(w)
    if n == 7:
        out[:3, :3] += xi[6] * np.eye(3)
        out[:3, 6] = -v
    return out


def left_jacobian(xi):
    """Sum of ad(xi)^k / (k+1)!, evaluated exactly through a block exponential."""
    A = ad(xi)
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = A
    M[:n, n:] = np.eye(n)
    return expm(M)[:n, n:]


def left_jacobian_inverse(xi):
    return np.linalg.inv(left_jacobian(xi))


def right_jacobian_inverse(xi):
    return np.linalg.inv(left_jacobian(-_check_twist(xi)))


def point_jacobian(points, with_scale=False):
    """dY/d(delta) for Y <- exp(delta) Y, i.e. [I, -hat(Y), Y]; (N, 3, 6|7)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    J = np.zeros((n, 3, 7 if with_scale else 6))
    J[:, :, :3] = np.eye(3)
    J[:, :, 3:6] = -batch_hat(points)
    if with_scale:
        J[:, :, 6] = points
    return J


def rotation_angle(pose):
    return float(np.linalg.norm(Rotation.from_quat(pose.rotation).as_rotvec()))


def relative_pose(pose_i, pose_j):
    """T_ij = T_j * T_i^-1 for world->camera poses."""
    return pose_j.compose(pose_i.inverse())


def interpolate(pose_a, pose_b, t):
    """Pose a fraction t along the geodesic from pose_a to pose_b."""
    return left_update(pose_a, t * log_map(relative_pose(pose_a, pose_b)))
