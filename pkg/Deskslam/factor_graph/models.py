from dataclasses import dataclass, field

import numpy as np

from Deskslam.exceptions import ConfigurationError, ShapeMismatchError
from geom.models import Intrinsics, SE3Pose
from gsmap.models import ExposureParams

from .residuals import grid_field


@dataclass
class ScaleGrid:
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 2:
            raise ConfigurationError("scale grid must be 2-D")
        if np.any(self.coefficients <= 0):
            raise ConfigurationError("scale grid coefficients must be positive")

    @classmethod
    def ones(cls, rows=2, cols=2):
        return cls(np.ones((rows, cols)))

    @property
    def shape(self):
        return self.coefficients.shape

    @property
    def size(self):
        return self.coefficients.size

    def copy(self):
        return ScaleGrid(self.coefficients.copy())


@dataclass
class KeyframeState:
    """Optimisable state of one keyframe.

    Depth grids live on the working (strided) pixel grid; `image` and
    `normal_prior` keep the full resolution used by the mapper.
    """
    id: int
    pose: SE3Pose
    inv_depth: np.ndarray
    prior_depth: np.ndarray
    scale_grid: ScaleGrid = field(default_factory=ScaleGrid.ones)
    exposure: ExposureParams = field(default_factory=ExposureParams)
    is_pose_fixed: bool = False
    image: np.ndarray | None = None
    normal_prior: np.ndarray | None = None

    def __post_init__(self):
        self.inv_depth = np.asarray(self.inv_depth, dtype=np.float64)
        self.prior_depth = np.asarray(self.prior_depth, dtype=np.float64)
        if self.inv_depth.shape != self.prior_depth.shape:
            raise ShapeMismatchError(
                f"keyframe {self.id}: depth {self.inv_depth.shape} vs prior {self.prior_depth.shape}")
        if np.any(self.inv_depth <= 0):
            raise ConfigurationError(f"keyframe {self.id}: inverse depths must be positive")
        if np.any(self.prior_depth <= 0):
            raise ConfigurationError(f"keyframe {self.id}: prior depths must be positive")

    @property
    def shape(self):
        return self.inv_depth.shape

    @property
    def prior_inv_depth(self):
        return 1.0 / self.prior_depth

    @property
    def depth(self):
        return 1.0 / self.inv_depth

    def aligned_prior_depth(self):
        """Prior depth after applying the scale grid."""
        return self.prior_depth * grid_field(self.scale_grid, self.shape)


@dataclass
class ReprojectionEdge:
    src: int
    dst: int
    targets: np.ndarray
    confidences: np.ndarray
    active: bool = True
    loop: bool = False

    def __post_init__(self):
        if self.src == self.dst:
            raise ConfigurationError("edge endpoints must differ")
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if self.targets.shape != self.confidences.shape or self.targets.shape[-1] != 2:
            raise ShapeMismatchError("targets and confidences must both be (H, W, 2)")
        if not np.all(np.isfinite(self.targets)):
            raise ConfigurationError(f"edge {self.src}->{self.dst}: non-finite targets")
        if np.any(self.confidences < 0):
            raise ConfigurationError(f"edge {self.src}->{self.dst}: negative confidences")

    @property
    def key(self):
        return (self.src, self.dst)

    @property
    def n_valid(self):
        return int(np.count_nonzero(self.confidences[..., 0] > 0))


@dataclass
class KeyframeGraph:
    K: Intrinsics
    window_size: int = 8
    keyframes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {}
        kfs, self.keyframes = self.keyframes, []
        for kf in kfs:
            self.add_keyframe(kf)
        edges, self.edges = self.edges, []
        for edge in edges:
            self.add_edge(edge)

    def __len__(self):
        return len(self.keyframes)

    def __contains__(self, kf_id):
        return kf_id in self._index

    @property
    def ids(self):
        return [kf.id for kf in self.keyframes]

    def keyframe(self, kf_id):
        return self.keyframes[self._index[kf_id]]

    def add_keyframe(self, kf):
        if self.keyframes and kf.id <= self.keyframes[-1].id:
            raise ConfigurationError(f"keyframe ids must increase ({kf.id} after {self.keyframes[-1].id})")
        if kf.shape != self.K.shape:
            raise ShapeMismatchError(f"keyframe {kf.id} grid {kf.shape} does not match intrinsics {self.K.shape}")
        self._index[kf.id] = len(self.keyframes)
        self.keyframes.append(kf)
        return kf

    def add_edge(self, edge):
        if edge.src not in self or edge.dst not in self:
            raise ConfigurationError(f"edge {edge.src}->{edge.dst} references a missing keyframe")
        if edge.targets.shape[:2] != self.K.shape:
            raise ShapeMismatchError(f"edge {edge.src}->{edge.dst} has grid {edge.targets.shape[:2]}")
        if edge.active:
            self.edges = [e for e in self.edges if not (e.active and e.key == edge.key)]
        self.edges.append(edge)
        return edge

    def find_edge(self, src, dst, active=True):
        for edge in self.edges:
            if edge.key == (src, dst) and edge.active == active and not edge.loop:
                return edge
        return None

    def active_edges(self):
        return [e for e in self.edges if e.active]

    def inactive_edges(self):
        return [e for e in self.edges if not e.active and not e.loop]

    def loop_edges(self):
        return [e for e in self.edges if e.loop]

    def window_ids(self):
        return self.ids[-self.window_size:]

    def retire_edges(self):
        """Deactivate active edges with an endpoint outside the window."""
        window = set(self.window_ids())
        retired = 0
        for edge in self.edges:
            if edge.active and not (edge.src in window and edge.dst in window):
                edge.active = False
                retired += 1
        return retired

    def mean_depth(self, ids=None):
        ids = self.ids if ids is None else ids
        return float(np.mean([self.keyframe(i).depth.mean() for i in ids]))

    def poses(self):
        return [kf.pose for kf in self.keyframes]
