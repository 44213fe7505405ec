from dataclasses import dataclass, field

import numpy as np
import torch
from django.conf import settings
from torch import nn

from Deskslam.exceptions import ConfigurationError

DTYPE = torch.float64


def inverse_sigmoid(x):
    return torch.log(x / (1 - x))


def build_rotation(q):
    """(N, 4) quaternions, w-last, to (N, 3, 3) rotation matrices."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    x, y, z, w = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    scale: np.ndarray = field(default_factory=lambda: np.full(3, settings.DEFAULT_GAUSSIAN_SCALE))
    opacity: float = 0.5
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    anchor_kf: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        self.orientation = self.orientation / np.linalg.norm(self.orientation)
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (3,)).copy()
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ConfigurationError("Gaussian scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ConfigurationError(f"opacity {self.opacity} outside [0, 1]")


@dataclass
class ExposureParams:
    """Affine colour correction I' = A I + b (the 3x4 matrix [A | b])."""
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64).reshape(3, 3)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(3)

    def matrix(self):
        return np.hstack([self.A, self.b[:, None]])


@dataclass
class RenderOutput:
    color: torch.Tensor     # (H, W, 3)
    depth: torch.Tensor     # (H, W)
    alpha: torch.Tensor     # (H, W)
    normal: torch.Tensor    # (H, W, 3)
    normal_valid: torch.Tensor

    def numpy(self):
        return {name: getattr(self, name).detach().numpy()
                for name in ('color', 'depth', 'alpha', 'normal', 'normal_valid')}


@dataclass
class MapTargets:
    color: torch.Tensor         # (H, W, 3)
    depth: torch.Tensor         # (H, W), 0 where unknown
    normal: torch.Tensor | None = None

    @classmethod
    def from_arrays(cls, color, depth, normal=None):
        as_t = lambda a: None if a is None else torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)
        return cls(as_t(color), as_t(depth), as_t(normal))


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = settings.LAMBDA_C
    lambda_d: float = settings.LAMBDA_D
    lambda_n: float = settings.LAMBDA_N
    lambda_s: float = settings.LAMBDA_S

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_d, self.lambda_n, self.lambda_s) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass(frozen=True)
class MapConfig:
    psi: int = settings.DOWNSAMPLE_PSI
    stride: int = settings.MAP_STRIDE
    graph_stride: int = settings.GRAPH_STRIDE
    iters_per_keyframe: int = settings.MAP_ITERS_PER_KEYFRAME
    prune_interval: int = settings.PRUNE_INTERVAL
    reset_interval: int = settings.OPACITY_RESET_INTERVAL
    prune_opacity: float = settings.PRUNE_OPACITY
    reset_opacity: float = settings.RESET_OPACITY
    spawn_alpha: float = settings.SPAWN_ALPHA
    default_scale: float = settings.DEFAULT_GAUSSIAN_SCALE
    literal_scale_update: bool = settings.LITERAL_SCALE_UPDATE
    tile_size: int = settings.TILE_SIZE
    means_lr: float = settings.MEANS_LR
    colors_lr: float = settings.COLORS_LR
    opacity_lr: float = settings.OPACITY_LR
    scales_lr: float = settings.SCALES_LR
    quats_lr: float = settings.QUATS_LR

    def __post_init__(self):
        if min(self.psi, self.stride, self.graph_stride, self.tile_size) < 1:
            raise ConfigurationError("psi, strides and tile size must be >= 1")
        if not 0 <= self.prune_opacity < 1 or not 0 < self.reset_opacity < 1:
            raise ConfigurationError("opacity thresholds must lie in (0, 1)")


class GaussianMap:
    """Anisotropic Gaussians with their Adam state."""

    PARAMS = ('means', 'colors', 'opacity', 'scales', 'quats')

    def __init__(self, cfg=None):
        self.cfg = cfg or MapConfig()
        self._means = nn.Parameter(torch.zeros((0, 3), dtype=DTYPE))
        self._colors = nn.Parameter(torch.zeros((0, 3), dtype=DTYPE))
        self._opacity = nn.Parameter(torch.zeros((0, 1), dtype=DTYPE))
        self._scales = nn.Parameter(torch.zeros((0, 3), dtype=DTYPE))
        self._quats = nn.Parameter(torch.zeros((0, 4), dtype=DTYPE))
        self.anchors = torch.zeros(0, dtype=torch.long)
        self.ids = torch.zeros(0, dtype=torch.long)
        self.next_id = 0
        self.iteration = 0
        self.spatial_lr_scale = 1.0
        self.optimizer = None

    def __len__(self):
        return self._means.shape[0]

    @property
    def means(self):
        return self._means

    @property
    def colors(self):
        return self._colors

    @property
    def opacities(self):
        return torch.sigmoid(self._opacity).squeeze(-1)

    @property
    def scales(self):
        return torch.exp(self._scales)

    @property
    def quats(self):
        return self._quats / torch.linalg.norm(self._quats, dim=-1, keepdim=True)

    def rotations(self):
        return build_rotation(self._quats)

    @classmethod
    def from_primitives(cls, primitives, cfg=None):
        gmap = cls(cfg)
        gmap.add_primitives(primitives)
        return gmap

    def add_primitives(self, primitives):
        primitives = list(primitives)
        if not primitives:
            return 0
        stack = lambda name: np.stack([getattr(p, name) for p in primitives])
        return self.add(stack('mean'), stack('scale'), stack('color'),
                        np.array([p.anchor_kf for p in primitives]),
                        quats=stack('orientation'),
                        opacities=np.array([p.opacity for p in primitives]))

    def add(self, means, scales, colors, anchors, quats=None, opacities=None):
        n = len(means)
        if n == 0:
            return 0
        quats = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1)) if quats is None else quats
        opacities = np.full(n, 0.5) if opacities is None else np.asarray(opacities, dtype=np.float64)
        opacities = np.clip(opacities, 1e-12, 1 - 1e-12)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64).reshape(n, -1), (n, 3))
        new = {
            'means': torch.as_tensor(np.asarray(means), dtype=DTYPE).reshape(n, 3),
            'colors': torch.as_tensor(np.asarray(colors), dtype=DTYPE).reshape(n, 3),
            'opacity': inverse_sigmoid(torch.as_tensor(opacities, dtype=DTYPE)).reshape(n, 1),
            'scales': torch.log(torch.as_tensor(scales, dtype=DTYPE)),
            'quats': torch.as_tensor(np.asarray(quats), dtype=DTYPE).reshape(n, 4),
        }
        self._assign(self.cat_tensors_to_optimizer(new))
        self.anchors = torch.cat([self.anchors, torch.as_tensor(np.asarray(anchors), dtype=torch.long).reshape(n)])
        self.ids = torch.cat([self.ids, torch.arange(self.next_id, self.next_id + n)])
        self.next_id += n
        return n

    def primitives(self):
        means = self._means.detach().numpy()
        quats = self.quats.detach().numpy()
        scales = self.scales.detach().numpy()
        opac = self.opacities.detach().numpy()
        colors = self._colors.detach().numpy()
        anchors = self.anchors.numpy()
        return [GaussianPrimitive(means[k], quats[k], scales[k], float(opac[k]), colors[k], int(anchors[k]))
                for k in range(len(self))]

    def _assign(self, tensors):
        for name, tensor in tensors.items():
            setattr(self, f'_{name}', tensor)

    def _tensors(self):
        return {name: getattr(self, f'_{name}') for name in self.PARAMS}

    # Optimiser plumbing

    def training_setup(self, extent=1.0):
        self.spatial_lr_scale = extent
        cfg = self.cfg
        groups = [
            {'params': [self._means], 'lr': cfg.means_lr * extent, 'name': 'means'},
            {'params': [self._colors], 'lr': cfg.colors_lr, 'name': 'colors'},
            {'params': [self._opacity], 'lr': cfg.opacity_lr, 'name': 'opacity'},
            {'params': [self._scales], 'lr': cfg.scales_lr, 'name': 'scales'},
            {'params': [self._quats], 'lr': cfg.quats_lr, 'name': 'quats'},
        ]
        self.optimizer = torch.optim.Adam(groups, lr=0.0, eps=1e-15)
        return self.optimizer

    def replace_tensor_to_optimizer(self, tensor, name):
        if self.optimizer is None:
            param = nn.Parameter(tensor.detach().clone())
            setattr(self, f'_{name}', param)
            return param
        for group in self.optimizer.param_groups:
            if group['name'] != name:
                continue
            stored_state = self.optimizer.state.pop(group['params'][0], None)
            group['params'][0] = nn.Parameter(tensor.detach().clone())
            if stored_state is not None:
                stored_state['exp_avg'] = torch.zeros_like(tensor)
                stored_state['exp_avg_sq'] = torch.zeros_like(tensor)
                self.optimizer.state[group['params'][0]] = stored_state
            setattr(self, f'_{name}', group['params'][0])
            return group['params'][0]
        raise KeyError(name)

    def _prune_optimizer(self, keep):
        if self.optimizer is None:
            return {name: nn.Parameter(t.detach()[keep].clone()) for name, t in self._tensors().items()}
        tensors = {}
        for group in self.optimizer.param_groups:
            stored_state = self.optimizer.state.pop(group['params'][0], None)
            group['params'][0] = nn.Parameter(group['params'][0].detach()[keep].clone())
            if stored_state is not None:
                stored_state['exp_avg'] = stored_state['exp_avg'][keep]
                stored_state['exp_avg_sq'] = stored_state['exp_avg_sq'][keep]
                self.optimizer.state[group['params'][0]] = stored_state
            tensors[group['name']] = group['params'][0]
        return tensors

    def cat_tensors_to_optimizer(self, new):
        if self.optimizer is None:
            return {name: nn.Parameter(torch.cat([t.detach(), new[name]], dim=0))
                    for name, t in self._tensors().items()}
        tensors = {}
        for group in self.optimizer.param_groups:
            extension = new[group['name']]
            stored_state = self.optimizer.state.pop(group['params'][0], None)
            group['params'][0] = nn.Parameter(torch.cat([group['params'][0].detach(), extension], dim=0))
            if stored_state is not None:
                stored_state['exp_avg'] = torch.cat([stored_state['exp_avg'], torch.zeros_like(extension)], dim=0)
                stored_state['exp_avg_sq'] = torch.cat([stored_state['exp_avg_sq'], torch.zeros_like(extension)], dim=0)
                self.optimizer.state[group['params'][0]] = stored_state
            tensors[group['name']] = group['params'][0]
        return tensors

    def keep(self, mask):
        """Drop every primitive where `mask` is False."""
        mask = torch.as_tensor(mask, dtype=torch.bool)
        self._assign(self._prune_optimizer(mask))
        self.anchors = self.anchors[mask]
        self.ids = self.ids[mask]

    def reset_opacity(self, ceiling):
        capped = torch.minimum(self.opacities.detach(), torch.full_like(self.opacities, ceiling))
        self.replace_tensor_to_optimizer(inverse_sigmoid(capped).unsqueeze(-1), 'opacity')

    def set_state(self, means=None, quats=None, scales=None):
        """Overwrite geometry in place (no optimiser history change)."""
        with torch.no_grad():
            if means is not None:
                self._means.copy_(torch.as_tensor(means, dtype=DTYPE))
            if quats is not None:
                self._quats.copy_(torch.as_tensor(quats, dtype=DTYPE))
            if scales is not None:
                self._scales.copy_(torch.log(torch.as_tensor(scales, dtype=DTYPE)))

    def clamp_(self):
        with torch.no_grad():
            self._colors.clamp_(0.0, 1.0)

    def state_dict(self):
        return {name: t.detach().clone() for name, t in self._tensors().items()} | {
            'anchors': self.anchors.clone(), 'ids': self.ids.clone()}

    def load_state_dict(self, state):
        for name in self.PARAMS:
            with torch.no_grad():
                getattr(self, f'_{name}').copy_(state[name])
        self.anchors = state['anchors'].clone()
        self.ids = state['ids'].clone()

    def extent(self):
        if len(self) == 0:
            return 1.0
        m = self._means.detach()
        return float(torch.linalg.norm(m - m.mean(0), dim=1).max().clamp(min=1e-3))
