from dataclasses import dataclass, field

import numpy as np
from django.conf import settings
from scipy.linalg import cholesky, eigvalsh

from Deskslam.exceptions import ConfigurationError, DomainError
from geom.models import Sim3Pose

# Sigma^rel is symmetrised and floored before it is inverted into a weight
COVARIANCE_FLOOR = 1e-10
PSD_TOL = 1e-9


@dataclass(frozen=True)
class LoopThresholds:
    """Loop candidate gates: flow distance (px), orientation change (rad), keyframe gap."""
    tau_flow: float = settings.TAU_FLOW
    tau_ori: float = settings.TAU_ORI
    tau_temp: int = settings.TAU_TEMP

    def __post_init__(self):
        if not (self.tau_flow > 0 and self.tau_ori > 0 and self.tau_temp > 0):
            raise ConfigurationError("loop thresholds must be positive")


@dataclass(frozen=True)
class LoopCandidate:
    i: int      # earlier keyframe
    j: int      # new keyframe
    d_of: float
    dori: float


@dataclass
class RelPoseFactor:
    """Relative Sim(3) pose T_ij = T_j T_i^-1 distilled from dense correspondences.

    `covariance` is expressed in the tangent space of the residual
    log(rel_pose^-1 T_j T_i^-1).
    """
    i: int
    j: int
    rel_pose: Sim3Pose
    covariance: np.ndarray
    n_observations: int = 0
    variance_factor: float = 0.0

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (7, 7):
            raise ConfigurationError(f"relative pose covariance must be 7x7, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=PSD_TOL):
            raise DomainError(f"covariance of factor {self.i}->{self.j} is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if eigvalsh(cov)[0] < -PSD_TOL:
            raise DomainError(f"covariance of factor {self.i}->{self.j} is not positive semidefinite")
        self.covariance = cov

    @property
    def key(self):
        return (self.i, self.j)

    @property
    def information(self):
        eig, vec = np.linalg.eigh(self.covariance)
        return (vec / np.maximum(eig, COVARIANCE_FLOOR)) @ vec.T

    @property
    def sqrt_information(self):
        """Upper factor U with U^T U = information; whitened residual is U r."""
        return cholesky(self.information, lower=False)


@dataclass
class PgbaResult:
    report: object = None
    init_report: object = None
    scales: dict = field(default_factory=dict)
    updates: dict = field(default_factory=dict)
    n_rel_factors: int = 0
    n_loop_edges: int = 0
    dropped: list = field(default_factory=list)

    @property
    def diverged(self):
        return bool(self.report is not None and self.report.diverged)
