from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from Deskslam.exceptions import ConfigurationError
from factor_graph.models import ReprojectionEdge


@dataclass(frozen=True)
class PlaneSpec:
    """Plane n.x = offset with a sinusoidal texture; `extent` None means unbounded."""
    normal: tuple
    offset: float
    color: tuple = (0.6, 0.6, 0.6)
    extent: float | None = None
    texture_period: float = 0.5

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if not np.isclose(np.linalg.norm(n), 1.0):
            raise ConfigurationError("plane normals must be unit length")
        if self.texture_period <= 0:
            raise ConfigurationError("texture period must be positive")


@dataclass(frozen=True)
class SphereSpec:
    center: tuple
    radius: float
    color: tuple = (0.8, 0.3, 0.2)

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigurationError("sphere radius must be positive")


@dataclass(frozen=True)
class SceneSpec:
    planes: tuple = ()
    spheres: tuple = ()
    seed: int = 0
    kind: str = 'custom'

    def __post_init__(self):
        if not self.planes and not self.spheres:
            raise ConfigurationError("a scene needs at least one surface")


@dataclass(frozen=True)
class NoiseSpec:
    """Front-end imperfections injected by the simulator.

    `prior_corners` plants one 2x2 multiplicative field for every keyframe;
    when it is None each keyframe draws its corners from `corner_range`.
    `smooth_field` False collapses the field to the top-left multiplier.
    """
    flow_sigma: float = settings.FLOW_SIGMA
    prior_corners: tuple | None = None
    corner_range: tuple = (0.7, 1.4)
    smooth_field: bool = settings.SMOOTH_FIELD
    prior_noise_sigma: float = settings.PRIOR_NOISE_SIGMA
    scale_drift_rate: float = settings.SCALE_DRIFT_RATE
    yaw_drift: float = settings.YAW_DRIFT

    def __post_init__(self):
        if self.flow_sigma < 0 or self.prior_noise_sigma < 0:
            raise ConfigurationError("noise sigmas must be non-negative")
        if self.prior_corners is not None and np.any(np.asarray(self.prior_corners) <= 0):
            raise ConfigurationError("prior corner multipliers must be positive")
        low, high = self.corner_range
        if not 0 < low <= high:
            raise ConfigurationError("corner range must be positive and ordered")
        if self.scale_drift_rate <= 0:
            raise ConfigurationError("scale drift rate must be positive")

    @classmethod
    def clean(cls):
        return cls(flow_sigma=0.0, prior_corners=((1.0, 1.0), (1.0, 1.0)), prior_noise_sigma=0.0,
                   scale_drift_rate=1.0, yaw_drift=0.0)


@dataclass
class GroundTruth:
    depth: np.ndarray       # (H, W) camera z, 0 where nothing is hit
    color: np.ndarray       # (H, W, 3)
    normals: np.ndarray     # (H, W, 3) camera frame, facing the camera

    @property
    def valid(self):
        return self.depth > 0


@dataclass
class Correspondences:
    targets: np.ndarray         # (H, W, 2)
    confidences: np.ndarray     # (H, W, 2)
    covisibility: float
    mean_flow: float

    @property
    def empty(self):
        return not np.any(self.confidences > 0)

    def to_edge(self, src, dst, loop=False):
        return ReprojectionEdge(src, dst, self.targets, self.confidences, active=not loop, loop=loop)


@dataclass
class Trajectory:
    kind: str
    gt: list
    drifted: list
    drift_scales: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.gt)
