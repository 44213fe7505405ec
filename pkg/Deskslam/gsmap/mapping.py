import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from django.conf import settings
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from Deskslam.exceptions import MapGraphDesyncError
from geom.lie import left_update

from .losses import compute_loss, fit_exposure
from .models import DTYPE, ExposureParams, GaussianMap, GaussianPrimitive, LossWeights, MapConfig, MapTargets
from .render import render

logger = logging.getLogger(__name__)


def init_from_keyframe(kf, K, psi=None, rng=None, mask=None, default_scale=None, image_stride=None):
    """Seed primitives by back-projecting a random 1/psi subset of the keyframe's depth.

    `K` describes the grid of `kf.inv_depth`; `mask` restricts seeding to
    selected pixels of that grid.
    """
    psi = settings.DOWNSAMPLE_PSI if psi is None else psi
    default_scale = settings.DEFAULT_GAUSSIAN_SCALE if default_scale is None else default_scale
    rng = rng if rng is not None else np.random.default_rng(kf.id)
    candidates = np.arange(kf.inv_depth.size) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
    if candidates.size == 0:
        return []
    if psi > 1:
        picked = np.sort(rng.choice(candidates, math.ceil(candidates.size / psi), replace=False))
    else:
        picked = candidates
    uv = K.pixel_grid().reshape(-1, 2)[picked]
    points = kf.pose.inverse().apply(K.rays(uv) / kf.inv_depth.reshape(-1)[picked, None])
    if len(points) >= 4:
        dist, _ = cKDTree(points).query(points, k=4)
        scales = np.maximum(dist[:, 1:].mean(axis=1), 1e-6)
    else:
        scales = np.full(len(points), default_scale)
    if kf.image is not None:
        stride = image_stride or max(1, round((kf.image.shape[1] - 1) / max(K.width - 1, 1)))
        rows = np.clip(np.round(uv[:, 1] * stride).astype(int), 0, kf.image.shape[0] - 1)
        cols = np.clip(np.round(uv[:, 0] * stride).astype(int), 0, kf.image.shape[1] - 1)
        colors = kf.image[rows, cols]
    else:
        colors = np.full((len(points), 3), 0.5)
    return [GaussianPrimitive(points[n], scale=scales[n], opacity=0.5, color=colors[n], anchor_kf=kf.id)
            for n in range(len(points))]


def prune(gmap, threshold):
    keep = gmap.opacities.detach() >= threshold
    removed = int((~keep).sum())
    if removed:
        gmap.keep(keep)
    return removed


def densify(gmap):
    """Split/clone extension point; growth currently comes from keyframe seeding."""
    return 0


def densify_prune(gmap, cfg=None):
    """Interval-driven opacity pruning and opacity reset, keyed on gmap.iteration."""
    cfg = cfg or gmap.cfg
    it = gmap.iteration
    removed = 0
    if it > 0 and it % cfg.prune_interval == 0:
        densify(gmap)
        removed = prune(gmap, cfg.prune_opacity)
        if removed:
            logger.info("pruned %d Gaussians at iteration %d (%d left)", removed, it, len(gmap))
    if it > 0 and it % cfg.reset_interval == 0:
        gmap.reset_opacity(cfg.reset_opacity)
    return removed


def deform_map(gmap, updates, literal_scale_update=None):
    """Move primitives with their anchor keyframe.

    `updates` maps keyframe id -> (old_pose, new_pose, scale). Each primitive
    becomes new_pose^-1 (old_pose mu / s); orientations follow the camera
    rotation change and Gaussian scales are divided by s (multiplied when
    `literal_scale_update` is set).
    """
    literal = settings.LITERAL_SCALE_UPDATE if literal_scale_update is None else literal_scale_update
    if len(gmap) == 0:
        return gmap
    anchors = gmap.anchors.numpy()
    missing = set(np.unique(anchors).tolist()) - set(updates)
    if missing:
        raise MapGraphDesyncError(f"no pose update for anchor keyframes {sorted(missing)}")
    means = gmap.means.detach().numpy().copy()
    quats = gmap.quats.detach().numpy().copy()
    scales = gmap.scales.detach().numpy().copy()
    changed = False
    for kf_id in np.unique(anchors):
        old, new, s = updates[int(kf_id)]
        if s == 1.0 and np.array_equal(old.matrix(), new.matrix()):
            continue
        changed = True
        sel = anchors == kf_id
        means[sel] = new.inverse().apply(old.apply(means[sel]) / s)
        delta = Rotation.from_matrix(new.rotation_matrix.T @ old.rotation_matrix)
        quats[sel] = (delta * Rotation.from_quat(quats[sel])).as_quat()
        scales[sel] = scales[sel] * s if literal else scales[sel] / s
    if changed:
        gmap.set_state(means=means, quats=quats, scales=scales)
    return gmap


def keyframe_targets(kf, K_map, map_stride=None, graph_stride=None):
    """Colour, depth and normal targets of a keyframe on the mapping grid."""
    map_stride = map_stride or settings.MAP_STRIDE
    graph_stride = graph_stride or settings.GRAPH_STRIDE
    rows = np.arange(K_map.height) * map_stride / graph_stride
    cols = np.arange(K_map.width) * map_stride / graph_stride
    rr, cc = np.meshgrid(rows, cols, indexing='ij')
    depth = map_coordinates(kf.depth, [rr, cc], order=1, mode='nearest')
    if kf.image is not None:
        color = kf.image[::map_stride, ::map_stride][:K_map.height, :K_map.width]
    else:
        color = np.zeros(K_map.shape + (3,))
    normal = None
    if kf.normal_prior is not None:
        normal = kf.normal_prior[::map_stride, ::map_stride][:K_map.height, :K_map.width]
    return MapTargets.from_arrays(color, depth, normal)


def _finite(gmap):
    return all(bool(torch.isfinite(t).all()) for t in gmap._tensors().values())


def optimize_map(gmap, keyframes, iters=None, weights=None, K_map=None, targets=None):
    """Adam on every primitive attribute, cycling through `keyframes`.

    Returns the per-iteration losses. A non-finite loss stops the loop and
    restores the last finite map.
    """
    iters = gmap.cfg.iters_per_keyframe if iters is None else iters
    weights = weights or LossWeights()
    losses = []
    if iters == 0 or not keyframes or len(gmap) == 0:
        return losses
    if gmap.optimizer is None:
        gmap.training_setup(gmap.extent())
    targets = targets or {
        kf.id: keyframe_targets(kf, K_map, gmap.cfg.stride, gmap.cfg.graph_stride) for kf in keyframes}
    last_good = gmap.state_dict()
    for it in range(iters):
        kf = keyframes[it % len(keyframes)]
        out = render(gmap, kf.pose, K_map, tile_size=gmap.cfg.tile_size)
        loss, _ = compute_loss(out, targets[kf.id], weights, gmap.scales, exposure=kf.exposure)
        if not torch.isfinite(loss):
            logger.warning("non-finite map loss at iteration %d; keeping last finite state", gmap.iteration)
            gmap.load_state_dict(last_good)
            break
        gmap.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        gmap.optimizer.step()
        gmap.clamp_()
        if not _finite(gmap):
            logger.warning("non-finite map parameters at iteration %d; keeping last finite state", gmap.iteration)
            gmap.load_state_dict(last_good)
            break
        gmap.iteration += 1
        densify_prune(gmap)
        last_good = gmap.state_dict()
        losses.append(float(loss))
    return losses


@dataclass
class _TensorExposure:
    A: torch.Tensor
    b: torch.Tensor


@dataclass
class RefineResult:
    losses: list = field(default_factory=list)
    pose_updates: dict = field(default_factory=dict)


def _expon_lr(lr_init, lr_final, step, max_steps):
    if max_steps <= 1 or lr_init <= 0:
        return lr_init
    frac = min(step / (max_steps - 1), 1.0)
    return math.exp((1 - frac) * math.log(lr_init) + frac * math.log(lr_final))


def joint_refine(gmap, keyframes, iters=None, weights=None, K_map=None, *, pose_lr=None,
                 pose_lr_final=None, exposure_lr=None, fit_exposures=True, refine_map=True):
    """Jointly refine primitives, keyframe poses (left twists) and exposures.

    The first keyframe's exposure is the colour reference and stays fixed;
    pose-fixed keyframes keep their poses.
    """
    iters = settings.REFINE_ITERS if iters is None else iters
    weights = weights or LossWeights()
    pose_lr = settings.POSE_LR if pose_lr is None else pose_lr
    pose_lr_final = settings.POSE_LR_FINAL if pose_lr_final is None else pose_lr_final
    exposure_lr = settings.EXPOSURE_LR if exposure_lr is None else exposure_lr
    result = RefineResult()
    if iters == 0 or not keyframes or len(gmap) == 0:
        return result
    if gmap.optimizer is None:
        gmap.training_setup(gmap.extent())
    targets = {kf.id: keyframe_targets(kf, K_map, gmap.cfg.stride, gmap.cfg.graph_stride) for kf in keyframes}

    if fit_exposures:
        with torch.no_grad():
            for kf in keyframes[1:]:
                out = render(gmap, kf.pose, K_map, tile_size=gmap.cfg.tile_size)
                kf.exposure = fit_exposure(out.color.numpy(), targets[kf.id].color.numpy(), out.alpha.numpy() > 0.5)

    deltas = {kf.id: torch.zeros(6, dtype=DTYPE, requires_grad=True)
              for kf in keyframes if not kf.is_pose_fixed}
    exposures = {}
    for n, kf in enumerate(keyframes):
        A = torch.as_tensor(kf.exposure.A, dtype=DTYPE).clone().requires_grad_(n > 0)
        b = torch.as_tensor(kf.exposure.b, dtype=DTYPE).clone().requires_grad_(n > 0)
        exposures[kf.id] = _TensorExposure(A, b)
    groups = [{'params': list(deltas.values()), 'lr': pose_lr, 'name': 'poses'}]
    trainable = [t for e in list(exposures.values())[1:] for t in (e.A, e.b)]
    if trainable:
        groups.append({'params': trainable, 'lr': exposure_lr, 'name': 'exposure'})
    groups = [g for g in groups if g['params']]
    camera_opt = torch.optim.Adam(groups) if groups else None

    for it in range(iters):
        lr = _expon_lr(pose_lr, pose_lr_final, it, iters)
        for group in groups:
            if group['name'] == 'poses':
                group['lr'] = lr
        kf = keyframes[it % len(keyframes)]
        out = render(gmap, kf.pose, K_map, pose_delta=deltas.get(kf.id), tile_size=gmap.cfg.tile_size)
        loss, _ = compute_loss(out, targets[kf.id], weights, gmap.scales, exposure=exposures[kf.id])
        if not torch.isfinite(loss):
            logger.warning("non-finite refinement loss at iteration %d; stopping", it)
            break
        if camera_opt is not None:
            camera_opt.zero_grad(set_to_none=True)
        gmap.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if camera_opt is not None:
            camera_opt.step()
        if refine_map:
            gmap.optimizer.step()
            gmap.clamp_()
        result.losses.append(float(loss))

    for kf in keyframes:
        e = exposures[kf.id]
        kf.exposure = ExposureParams(e.A.detach().numpy(), e.b.detach().numpy())
        if kf.id in deltas:
            delta = deltas[kf.id].detach().numpy()
            kf.pose = left_update(kf.pose, delta)
            result.pose_updates[kf.id] = delta
    return result


class Mapper:
    """Online map maintenance: silhouette-guided seeding plus a few Adam steps per keyframe."""

    def __init__(self, K_full, cfg=None, weights=None, seed=None):
        self.cfg = cfg or MapConfig()
        self.weights = weights or LossWeights()
        self.gmap = GaussianMap(self.cfg)
        self.graph_stride = self.cfg.graph_stride
        self.K_graph = K_full.downsample(self.graph_stride)
        self.K_map = K_full.downsample(self.cfg.stride)
        self.rng = np.random.default_rng([settings.SEED if seed is None else seed, 0x6d6170])
        self.size_history = []

    def spawn_mask(self, kf):
        if len(self.gmap) == 0:
            return None
        with torch.no_grad():
            out = render(self.gmap, kf.pose, self.K_graph, tile_size=self.cfg.tile_size)
        return out.alpha.numpy() < self.cfg.spawn_alpha

    def add_keyframe(self, kf, recent=()):
        prims = init_from_keyframe(kf, self.K_graph, self.cfg.psi, self.rng, self.spawn_mask(kf),
                                   self.cfg.default_scale, self.graph_stride)
        self.gmap.add_primitives(prims)
        keyframes = [kf] + [k for k in recent if k.id != kf.id]
        losses = optimize_map(self.gmap, keyframes, self.cfg.iters_per_keyframe, self.weights, self.K_map)
        self.size_history.append(len(self.gmap))
        logger.debug("map: kf %d seeded %d, size %d", kf.id, len(prims), len(self.gmap))
        return losses
