from pathlib import Path

import numpy as np
import torch

from Deskslam.exceptions import StorageError
from geom.io import read_tum
from geom.lie import interpolate
from gsmap.io import load_ply, write_ppm
from gsmap.render import render

from ..base import RunConfigCommand


class Command(RunConfigCommand):
    help = 'Render novel views halfway between consecutive keyframes of a saved run.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--traj', help='TUM trajectory whose in-between views are rendered')

    def handle(self, *args, **options):
        cfg = self.run_config(options)
        out = Path(cfg.out_dir)
        traj = Path(options['traj']) if options['traj'] else out / 'traj_refine.txt'
        if not traj.is_file():
            raise StorageError(f"trajectory {traj} not found")
        gmap = load_ply(out / 'map.ply', cfg.map)
        if len(gmap) == 0:
            raise StorageError(f"{out / 'map.ply'} holds no Gaussians")
        K_map = cfg.K.downsample(cfg.map.stride)
        ids, poses = read_tum(traj)
        views = [(f'{int(a):04d}_{int(b):04d}', interpolate(p, q, 0.5))
                 for a, b, p, q in zip(ids[:-1], ids[1:], poses[:-1], poses[1:])]
        for name, pose in views:
            with torch.no_grad():
                color = render(gmap, pose, K_map, tile_size=cfg.map.tile_size).color.numpy()
            write_ppm(out / 'novel' / f'view_{name}.ppm', np.clip(color, 0.0, 1.0))
        self.stdout.write(f"{len(views)} novel views written to {out / 'novel'}")
