"""Dump and reload synthetic datasets.

Layout of a dataset directory:

    scene.cfg            key=value generation parameters
    gt_traj.txt          ground-truth keyframe poses (TUM, stamp = index)
    kf_<n>_depth.f32     ground-truth depth, full resolution
    kf_<n>_prior.f32     depth prior on the graph grid
    kf_<n>_color.ppm     ground-truth colour image
    edges.bin            KFG1 snapshot: ground-truth states and local edges
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from decouple import Config, RepositoryEnv, UndefinedValueError
from django.conf import settings

from Deskslam.exceptions import StorageError
from factor_graph.io import read_grid, read_graph, save_graph, write_grid
from factor_graph.models import KeyframeGraph
from geom.io import read_tum, write_tum
from geom.models import Intrinsics
from gsmap.io import read_ppm, write_ppm

from .correspondences import SimulatedFrontend
from .models import NoiseSpec
from .scenes import build_scene
from .trajectories import gen_trajectory

logger = logging.getLogger(__name__)


def build_frontend(scene_kind=None, trajectory_kind=None, n_keyframes=None, K=None, noise=None, seed=None,
                   graph_stride=None):
    seed = settings.SEED if seed is None else seed
    K = K or Intrinsics.default(settings.IMAGE_WIDTH, settings.IMAGE_HEIGHT, settings.FOCAL)
    noise = noise or NoiseSpec()
    scene = build_scene(scene_kind or settings.SCENE_KIND, seed)
    trajectory = gen_trajectory(trajectory_kind or settings.TRAJECTORY_KIND,
                                n_keyframes or settings.N_KEYFRAMES, noise)
    return SimulatedFrontend(scene, trajectory, K, noise, seed, graph_stride)


def local_edges(frontend, ids, span=None):
    span = settings.INIT_EDGE_SPAN if span is None else span
    edges = []
    for i in ids:
        for j in ids:
            if i != j and abs(i - j) <= span:
                edge = frontend.edge(i, j)
                if edge is not None:
                    edges.append(edge)
    return edges


def ground_truth_graph(frontend, ids=None, span=None):
    """Graph of ground-truth keyframe states joined by local edges."""
    ids = list(range(len(frontend))) if ids is None else list(ids)
    graph = KeyframeGraph(frontend.K, settings.WINDOW)
    for k in ids:
        graph.add_keyframe(frontend.gt_keyframe(k))
    for edge in local_edges(frontend, ids, span):
        graph.add_edge(edge)
    return graph


def _scene_cfg(frontend):
    K, noise = frontend.K_full, frontend.noise
    return {
        'SCENE_KIND': frontend.scene.kind,
        'SEED': frontend.seed,
        'IMAGE_WIDTH': K.width,
        'IMAGE_HEIGHT': K.height,
        'FOCAL': K.fx,
        'TRAJECTORY_KIND': frontend.trajectory.kind,
        'N_KEYFRAMES': len(frontend),
        'GRAPH_STRIDE': frontend.graph_stride,
        'FLOW_SIGMA': noise.flow_sigma,
        'PRIOR_NOISE_SIGMA': noise.prior_noise_sigma,
        'SCALE_DRIFT_RATE': noise.scale_drift_rate,
        'YAW_DRIFT': noise.yaw_drift,
        'SMOOTH_FIELD': noise.smooth_field,
    }


def dump_dataset(out_dir, frontend, span=None):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / 'scene.cfg', 'w', encoding='utf-8', newline='\n') as fh:
            fh.writelines(f"{key}={value}\n" for key, value in _scene_cfg(frontend).items())
    except OSError as exc:
        raise StorageError(f"cannot write dataset {out}: {exc}") from exc
    ids = list(range(len(frontend)))
    write_tum(out / 'gt_traj.txt', ids, frontend.trajectory.gt)
    for k in ids:
        full = frontend.full(k)
        write_grid(out / f'kf_{k}_depth.f32', full.depth)
        write_grid(out / f'kf_{k}_prior.f32', frontend.prior(k)[0])
        write_ppm(out / f'kf_{k}_color.ppm', full.color)
    graph = ground_truth_graph(frontend, ids, span)
    save_graph(out / 'edges.bin', graph)
    logger.info("dataset: %d keyframes, %d edges written to %s", len(graph), len(graph.edges), out)
    return out


@dataclass
class Dataset:
    config: dict
    stamps: np.ndarray
    gt_poses: list
    graph: KeyframeGraph
    depths: dict = field(default_factory=dict)
    priors: dict = field(default_factory=dict)
    colors: dict = field(default_factory=dict)

    @property
    def K(self):
        return Intrinsics.default(self.config['IMAGE_WIDTH'], self.config['IMAGE_HEIGHT'], self.config['FOCAL'])


_CFG_CASTS = {
    'SCENE_KIND': str, 'SEED': int, 'IMAGE_WIDTH': int, 'IMAGE_HEIGHT': int, 'FOCAL': float,
    'TRAJECTORY_KIND': str, 'N_KEYFRAMES': int, 'GRAPH_STRIDE': int, 'FLOW_SIGMA': float,
    'PRIOR_NOISE_SIGMA': float, 'SCALE_DRIFT_RATE': float, 'YAW_DRIFT': float, 'SMOOTH_FIELD': bool,
}


def load_dataset(path):
    root = Path(path)
    if not (root / 'scene.cfg').is_file():
        raise StorageError(f"{root} has no scene.cfg")
    cfg = Config(RepositoryEnv(str(root / 'scene.cfg')))
    try:
        config = {key: cfg(key, cast=cast) for key, cast in _CFG_CASTS.items()}
    except (UndefinedValueError, ValueError) as exc:
        raise StorageError(f"bad scene.cfg in {root}: {exc}") from exc
    stamps, poses = read_tum(root / 'gt_traj.txt')
    dataset = Dataset(config, stamps, poses, read_graph(root / 'edges.bin'))
    for k in range(config['N_KEYFRAMES']):
        dataset.depths[k] = read_grid(root / f'kf_{k}_depth.f32')
        dataset.priors[k] = read_grid(root / f'kf_{k}_prior.f32')
        dataset.colors[k] = read_ppm(root / f'kf_{k}_color.ppm')
    return dataset
