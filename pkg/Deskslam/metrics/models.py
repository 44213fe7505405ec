from dataclasses import asdict, dataclass

from Deskslam.exceptions import DomainError


@dataclass(frozen=True)
class DepthMetrics:
    abs_diff: float
    abs_rel: float
    sq_rel: float
    rmse: float
    delta_105: float
    delta_125: float

    def __post_init__(self):
        if not 0.0 <= self.delta_105 <= self.delta_125 <= 1.0:
            raise DomainError(f"threshold accuracies out of order: {self.delta_105}, {self.delta_125}")

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Alignment:
    """x_gt ~ scale * R @ x_est + t"""
    rotation: object
    translation: object
    scale: float = 1.0

    def apply(self, points):
        return self.scale * points @ self.rotation.T + self.translation
