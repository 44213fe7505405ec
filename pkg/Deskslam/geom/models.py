from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import ConfigurationError


def _unit_quat(q):
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ConfigurationError(f"invalid quaternion {q}")
    return q / n


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform; quaternion stored w-last (x, y, z, w)."""
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, 'rotation', _unit_quat(self.rotation))
        object.__setattr__(self, 'translation', np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(Rotation.from_matrix(T[:3, :3]).as_quat(), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(Rotation.from_matrix(R).as_quat(), t)

    @property
    def scale(self):
        return 1.0

    @cached_property
    def rotation_matrix(self):
        return Rotation.from_quat(self.rotation).as_matrix()

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def compose(self, other):
        """self ∘ other (other is applied first)."""
        if isinstance(other, Sim3Pose):
            return Sim3Pose.from_se3(self).compose(other)
        R = self.rotation_matrix
        q = (Rotation.from_quat(self.rotation) * Rotation.from_quat(other.rotation)).as_quat()
        return SE3Pose(q, R @ other.translation + self.translation)

    def inverse(self):
        Rt = self.rotation_matrix.T
        q = Rotation.from_quat(self.rotation).inv().as_quat()
        return SE3Pose(q, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def center(self):
        """Camera centre in world coordinates (pose is world->camera)."""
        return self.inverse().translation

    def to_sim3(self):
        return Sim3Pose.from_se3(self)

    def __repr__(self):
        return f"SE3Pose(q={np.round(self.rotation, 6)}, t={np.round(self.translation, 6)})"


@dataclass(frozen=True, eq=False)
class Sim3Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'rotation', _unit_quat(self.rotation))
        object.__setattr__(self, 'translation', np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.scale > 0.0:
            raise ConfigurationError(f"Sim(3) scale must be positive, got {self.scale}")
        object.__setattr__(self, 'scale', float(self.scale))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_se3(cls, pose, scale=1.0):
        return cls(pose.rotation, pose.translation, scale)

    @cached_property
    def rotation_matrix(self):
        return Rotation.from_quat(self.rotation).as_matrix()

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation_matrix
        T[:3, 3] = self.translation
        return T

    def compose(self, other):
        if isinstance(other, SE3Pose):
            other = Sim3Pose.from_se3(other)
        q = (Rotation.from_quat(self.rotation) * Rotation.from_quat(other.rotation)).as_quat()
        t = self.scale * (self.rotation_matrix @ other.translation) + self.translation
        return Sim3Pose(q, t, self.scale * other.scale)

    def inverse(self):
        Rt = self.rotation_matrix.T
        q = Rotation.from_quat(self.rotation).inv().as_quat()
        return Sim3Pose(q, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.rotation_matrix.T) + self.translation

    def center(self):
        return self.inverse().translation

    def to_se3(self):
        """Drop the scale into the camera frame: x_cam/s = R x + t/s."""
        return SE3Pose(self.rotation, self.translation / self.scale)

    def __repr__(self):
        return (f"Sim3Pose(q={np.round(self.rotation, 6)}, t={np.round(self.translation, 6)}, "
                f"s={self.scale:.6f})")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    @classmethod
    def default(cls, width, height, focal):
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self):
        return (self.height, self.width)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downsample(self, stride):
        """Intrinsics of the grid whose pixel k sits on full-resolution pixel stride*k."""
        if stride == 1:
            return self
        return Intrinsics(self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride,
                          (self.width - 1) // stride + 1, (self.height - 1) // stride + 1)

    def pixel_grid(self):
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        return np.stack([u, v], axis=-1)

    def rays(self, pixels):
        """Camera-frame ray directions with unit z for (..., 2) pixels."""
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def contains(self, pixels, margin=0.0):
        pixels = np.asarray(pixels)
        return ((pixels[..., 0] >= -margin) & (pixels[..., 0] <= self.width - 1 + margin)
                & (pixels[..., 1] >= -margin) & (pixels[..., 1] <= self.height - 1 + margin))
