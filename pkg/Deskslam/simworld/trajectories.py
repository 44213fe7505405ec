import numpy as np
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import ConfigurationError
from geom.models import SE3Pose

from .models import NoiseSpec, Trajectory

ORBIT_RADIUS = 1.2
LOOP_GAP = 0.05
TURN_STEP = np.radians(35.0)


def look_at(center, target, down=(0.0, 1.0, 0.0)):
    """World->camera pose of a camera at `center` looking at `target` (y down)."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return SE3Pose.from_rt(R, -R @ center)


def _orbit(angles, height=-0.2, target=(0.0, 0.2, 0.0)):
    return [look_at((ORBIT_RADIUS * np.sin(a), height, -ORBIT_RADIUS * np.cos(a)), target) for a in angles]


def _loop(n):
    # stop LOOP_GAP short of the start so the last keyframe revisits the first
    sweep = 2 * np.pi - 2 * np.arcsin(LOOP_GAP / (2 * ORBIT_RADIUS))
    return _orbit(sweep * np.arange(n) / (n - 1))


def _revisit(n):
    return _orbit(3 * np.pi * np.arange(n) / (n - 1))


def _straight(n):
    xs = np.linspace(-1.0, 1.0, n)
    return [look_at((x, -0.2, -1.8), (x, 0.0, 0.2)) for x in xs]


def _forward_then_rotate(n):
    n_forward = max(2, n // 2)
    poses = [look_at((0.0, -0.2, z), (0.0, -0.1, z + 2.0)) for z in np.linspace(-2.4, -1.6, n_forward)]
    last = poses[-1]
    for k in range(1, n - n_forward + 1):
        turn = SE3Pose.from_rt(Rotation.from_euler('y', -k * TURN_STEP).as_matrix(), np.zeros(3))
        poses.append(turn.compose(last))
    return poses


KINDS = {
    'straight': _straight,
    'loop': _loop,
    'forward_rotate': _forward_then_rotate,
    'revisit': _revisit,
}


def drift(gt, noise):
    """Chain GT steps with multiplicative scale drift and yaw drift.

    Step k has its translation scaled by rate^k and its rotation preceded by
    a yaw of `yaw_drift` about the camera y axis. Returns the drifted poses
    and the per-keyframe local scales rate^k.
    """
    rate = noise.scale_drift_rate
    yaw = Rotation.from_euler('y', noise.yaw_drift).as_matrix()
    drifted = [gt[0]]
    for k in range(1, len(gt)):
        step = gt[k].compose(gt[k - 1].inverse())
        noisy = SE3Pose.from_rt(yaw @ step.rotation_matrix, step.translation * rate ** k)
        drifted.append(noisy.compose(drifted[-1]))
    return drifted, rate ** np.arange(len(gt), dtype=np.float64)


def gen_trajectory(kind, n_keyframes, noise=None):
    if kind not in KINDS:
        raise ConfigurationError(f"unknown trajectory kind {kind!r} (choose from {sorted(KINDS)})")
    if n_keyframes < 2:
        raise ConfigurationError("a trajectory needs at least two keyframes")
    noise = noise or NoiseSpec()
    gt = KINDS[kind](n_keyframes)
    drifted, scales = drift(gt, noise)
    return Trajectory(kind, gt, drifted, scales)
