from dataclasses import dataclass, field

from django.conf import settings

from Deskslam.exceptions import ConfigurationError


@dataclass(frozen=True)
class TrackerConfig:
    """Keyframe selection, initialisation and sliding-window schedule.

    `overlap_flow_factor` scales `d_flow` into the mean-flow bound under which
    a window keyframe counts as overlapping a new keyframe and gets edges.
    """
    d_flow: float = settings.D_FLOW
    n_init: int = settings.N_INIT
    window: int = settings.WINDOW
    ba_jdsa_interleave: int = settings.BA_JDSA_INTERLEAVE
    init_edge_span: int = settings.INIT_EDGE_SPAN
    overlap_flow_factor: float = settings.OVERLAP_FLOW_FACTOR
    ba_iters: int = settings.GN_MAX_ITERS
    init_iters: int = 3 * settings.GN_MAX_ITERS
    prior_weight: float = settings.PRIOR_WEIGHT
    jdsa: bool = settings.JDSA

    def __post_init__(self):
        if self.n_init < 3:
            raise ConfigurationError(f"n_init must be at least 3, got {self.n_init}")
        if self.window < 2:
            raise ConfigurationError(f"window must be at least 2, got {self.window}")
        if self.d_flow < 0:
            raise ConfigurationError("d_flow must be non-negative")
        if self.ba_jdsa_interleave < 1 or self.init_edge_span < 1:
            raise ConfigurationError("interleave count and edge span must be positive")

    @property
    def overlap_flow(self):
        return self.overlap_flow_factor * self.d_flow


@dataclass
class StepReport:
    """Solver outcomes of one tracker step."""
    kf_id: int
    ba: list = field(default_factory=list)
    jdsa: list = field(default_factory=list)

    @property
    def diverged(self):
        return any(r.diverged for r in self.ba + self.jdsa)
