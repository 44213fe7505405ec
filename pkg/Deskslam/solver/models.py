from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.sparse as sp
from django.conf import settings

from Deskslam.exceptions import ConfigurationError, ShapeMismatchError


@dataclass(frozen=True)
class DampingConfig:
    epsilon: float = settings.DAMPING_EPSILON
    lam: float = settings.DAMPING_LAMBDA

    def __post_init__(self):
        if self.epsilon < 0 or self.lam < 0:
            raise ConfigurationError("damping factors must be non-negative")


@dataclass
class FactorBlock:
    """A batch of observations sharing one set of primary columns.

    Every observation n has `m` scalar rows with diagonal weights, a Jacobian
    over the shared primary columns and at most one depth variable.
    Column -1 marks a fixed variable: it stays in the residual but gets no
    column in the system.
    """
    cols: np.ndarray        # (kp,) primary columns
    residuals: np.ndarray   # (N, m)
    weights: np.ndarray     # (N, m)
    J_primary: np.ndarray   # (N, m, kp)
    depth_cols: np.ndarray | None = None   # (N,), -1 for none
    J_depth: np.ndarray | None = None      # (N, m)

    def __post_init__(self):
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.residuals = np.asarray(self.residuals, dtype=np.float64)
        if self.residuals.ndim == 1:
            self.residuals = self.residuals[:, None]
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=np.float64), self.residuals.shape)
        n, m = self.residuals.shape
        self.J_primary = np.asarray(self.J_primary, dtype=np.float64).reshape(n, m, self.cols.size)
        if self.J_depth is not None:
            self.J_depth = np.asarray(self.J_depth, dtype=np.float64).reshape(n, m)
            self.depth_cols = np.asarray(self.depth_cols, dtype=np.int64).reshape(n)
        elif self.depth_cols is not None:
            raise ShapeMismatchError("depth columns given without a depth Jacobian")

    @property
    def n_rows(self):
        return self.residuals.size

    def objective(self):
        return float(np.sum(self.weights * self.residuals ** 2))


@dataclass
class BlockSystem:
    """Normal equations [[B, E], [E^T, C]] [dp; dd] = [v; w] with diagonal C."""
    B: np.ndarray
    E: sp.csr_matrix
    C: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        if self.B.shape != (self.v.size, self.v.size):
            raise ShapeMismatchError(f"B {self.B.shape} vs v {self.v.shape}")
        if self.E.shape != (self.v.size, self.w.size) or self.C.shape != self.w.shape:
            raise ShapeMismatchError(f"E {self.E.shape} inconsistent with B {self.B.shape} / C {self.C.shape}")

    @property
    def n_primary(self):
        return self.v.size

    @property
    def n_depth(self):
        return self.w.size

    def C_matrix(self):
        return sp.diags(self.C, format='csr')

    def dense(self):
        """Full Hessian and gradient; for checks on small problems."""
        H = np.zeros((self.n_primary + self.n_depth,) * 2)
        H[:self.n_primary, :self.n_primary] = self.B
        H[:self.n_primary, self.n_primary:] = self.E.toarray()
        H[self.n_primary:, :self.n_primary] = self.E.toarray().T
        H[self.n_primary:, self.n_primary:] = np.diag(self.C)
        return H, np.concatenate([self.v, self.w])


@dataclass
class ConvergenceReport:
    converged: bool = False
    diverged: bool = False
    iterations: int = 0
    accepted: int = 0
    objectives: list = field(default_factory=list)
    final_damping: float = 0.0

    @property
    def initial_objective(self):
        return self.objectives[0] if self.objectives else float('nan')

    @property
    def final_objective(self):
        return self.objectives[-1] if self.objectives else float('nan')

    def as_dict(self):
        return {
            'converged': self.converged,
            'diverged': self.diverged,
            'iterations': self.iterations,
            'accepted': self.accepted,
            'initial_objective': self.initial_objective,
            'final_objective': self.final_objective,
        }


class Problem(Protocol):
    n_primary: int
    n_depth: int

    def objective(self) -> float: ...

    def linearize(self) -> list[FactorBlock]: ...

    def snapshot(self): ...

    def restore(self, state) -> None: ...

    def retract(self, dp: np.ndarray, dd: np.ndarray) -> None: ...
