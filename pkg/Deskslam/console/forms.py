"""Run configuration: command-line flags over a key=value file over settings.

Keys in the file use the same names as the settings module (FLOW_SIGMA,
TAU_ORI, LAMBDA_C, ...); anything the file does not name falls back to
settings. Environment variables win over the file, as decouple does.
"""
from dataclasses import dataclass
from pathlib import Path

from decouple import Config, RepositoryEnv, UndefinedValueError
from django import forms
from django.conf import settings

from Deskslam.exceptions import ConfigurationError
from geom.models import Intrinsics
from gsmap.models import LossWeights, MapConfig
from loops.models import LoopThresholds
from metrics.report import STAGES
from simworld.models import NoiseSpec
from simworld.scenes import SCENES
from simworld.trajectories import KINDS
from tracker.models import TrackerConfig

MAX_SEED = 2 ** 64 - 1


def _csv(value):
    return [s.strip() for s in value.split(',') if s.strip()] if isinstance(value, str) else list(value)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: Path
    stages: tuple
    scene_kind: str
    trajectory_kind: str
    n_keyframes: int
    image_width: int
    image_height: int
    focal: float
    graph_stride: int
    noise: NoiseSpec
    tracker: TrackerConfig
    thresholds: LoopThresholds
    weights: LossWeights
    map: MapConfig
    online_loops: bool = False
    dump_traj: bool = False
    pgba_iters: int = settings.PGBA_MAX_ITERS
    full_ba_iters: int = settings.FULL_BA_ITERS
    refine_iters: int = settings.REFINE_ITERS
    config_path: Path | None = None

    @property
    def K(self):
        return Intrinsics.default(self.image_width, self.image_height, self.focal)

    def enabled(self, stage):
        return stage in self.stages


class RunConfigForm(forms.Form):
    """Validates the options of a command and builds a RunConfig.

    Fields the caller leaves out fall back to the --config file, then to settings.
    """
    config = forms.CharField(required=False)
    seed = forms.IntegerField(required=False, min_value=0, max_value=MAX_SEED)
    stages = forms.CharField(required=False)
    out = forms.CharField(required=False)
    dump_traj = forms.BooleanField(required=False)

    def clean_config(self):
        path = self.cleaned_data.get('config')
        if not path:
            return None
        path = Path(path)
        if not path.is_file():
            raise forms.ValidationError(f"config file {path} does not exist")
        return path

    def clean_stages(self):
        stages = self.cleaned_data.get('stages')
        if not stages:
            return None
        names = _csv(stages)
        unknown = sorted(set(names) - set(STAGES))
        if unknown:
            raise forms.ValidationError(f"unknown stages {unknown} (choose from {list(STAGES)})")
        return names

    def clean_out(self):
        out = self.cleaned_data.get('out')
        return Path(out) if out else None

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        try:
            cleaned_data['run_config'] = self._build()
        except ConfigurationError as exc:
            raise forms.ValidationError(str(exc)) from exc
        return cleaned_data

    def error_text(self):
        return '; '.join(f"{name}: {' '.join(messages)}" for name, messages in sorted(self.errors.items()))

    def save(self):
        """The validated RunConfig; raises ConfigurationError when invalid."""
        if not self.is_valid():
            raise ConfigurationError(self.error_text())
        return self.cleaned_data['run_config']

    def _lookup(self):
        path = self.cleaned_data['config']
        source = Config(RepositoryEnv(str(path))) if path is not None else None

        def get(name, cast):
            default = getattr(settings, name)
            if source is None:
                return default
            try:
                return source(name, default=default, cast=cast)
            except (UndefinedValueError, ValueError) as exc:
                raise ConfigurationError(f"{path}: bad value for {name}: {exc}") from exc
        return get

    def _build(self):
        get = self._lookup()
        cleaned = self.cleaned_data

        stages = cleaned['stages'] if cleaned['stages'] is not None else _csv(get('STAGES', _csv))
        unknown = sorted(set(stages) - set(STAGES))
        if unknown:
            raise ConfigurationError(f"unknown stages {unknown} (choose from {list(STAGES)})")
        if 'tracking' not in stages:
            raise ConfigurationError("the tracking stage cannot be disabled")
        scene_kind = get('SCENE_KIND', str)
        if scene_kind not in SCENES:
            raise ConfigurationError(f"unknown scene kind {scene_kind!r} (choose from {sorted(SCENES)})")
        trajectory_kind = get('TRAJECTORY_KIND', str)
        if trajectory_kind not in KINDS:
            raise ConfigurationError(f"unknown trajectory kind {trajectory_kind!r} (choose from {sorted(KINDS)})")
        n_keyframes = get('N_KEYFRAMES', int)
        if n_keyframes < 2:
            raise ConfigurationError("N_KEYFRAMES must be at least 2")
        graph_stride = get('GRAPH_STRIDE', int)

        noise = NoiseSpec(
            flow_sigma=get('FLOW_SIGMA', float),
            smooth_field=get('SMOOTH_FIELD', bool),
            prior_noise_sigma=get('PRIOR_NOISE_SIGMA', float),
            scale_drift_rate=get('SCALE_DRIFT_RATE', float),
            yaw_drift=get('YAW_DRIFT', float),
        )
        tracker = TrackerConfig(
            d_flow=get('D_FLOW', float),
            n_init=get('N_INIT', int),
            window=get('WINDOW', int),
            ba_jdsa_interleave=get('BA_JDSA_INTERLEAVE', int),
            init_edge_span=get('INIT_EDGE_SPAN', int),
            overlap_flow_factor=get('OVERLAP_FLOW_FACTOR', float),
            ba_iters=get('GN_MAX_ITERS', int),
            init_iters=3 * get('GN_MAX_ITERS', int),
            prior_weight=get('PRIOR_WEIGHT', float),
            jdsa=get('JDSA', bool),
        )
        thresholds = LoopThresholds(get('TAU_FLOW', float), get('TAU_ORI', float), get('TAU_TEMP', int))
        weights = LossWeights(get('LAMBDA_C', float), get('LAMBDA_D', float), get('LAMBDA_N', float),
                              get('LAMBDA_S', float))
        map_cfg = MapConfig(
            psi=get('DOWNSAMPLE_PSI', int),
            stride=get('MAP_STRIDE', int),
            graph_stride=graph_stride,
            iters_per_keyframe=get('MAP_ITERS_PER_KEYFRAME', int),
            prune_interval=get('PRUNE_INTERVAL', int),
            reset_interval=get('OPACITY_RESET_INTERVAL', int),
            prune_opacity=get('PRUNE_OPACITY', float),
            reset_opacity=get('RESET_OPACITY', float),
            spawn_alpha=get('SPAWN_ALPHA', float),
            default_scale=get('DEFAULT_GAUSSIAN_SCALE', float),
            literal_scale_update=get('LITERAL_SCALE_UPDATE', bool),
            tile_size=get('TILE_SIZE', int),
        )
        return RunConfig(
            seed=cleaned['seed'] if cleaned['seed'] is not None else get('SEED', int),
            out_dir=cleaned['out'] or Path(get('OUTPUT_DIR', str)),
            stages=tuple(s for s in STAGES if s in stages),
            scene_kind=scene_kind,
            trajectory_kind=trajectory_kind,
            n_keyframes=n_keyframes,
            image_width=get('IMAGE_WIDTH', int),
            image_height=get('IMAGE_HEIGHT', int),
            focal=get('FOCAL', float),
            graph_stride=graph_stride,
            noise=noise,
            tracker=tracker,
            thresholds=thresholds,
            weights=weights,
            map=map_cfg,
            online_loops=get('ONLINE_LOOPS', bool),
            dump_traj=cleaned['dump_traj'] or get('DUMP_TRAJ', bool),
            pgba_iters=get('PGBA_MAX_ITERS', int),
            full_ba_iters=get('FULL_BA_ITERS', int),
            refine_iters=get('REFINE_ITERS', int),
            config_path=cleaned['config'],
        )
