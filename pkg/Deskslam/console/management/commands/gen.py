from simworld.dataset import build_frontend, dump_dataset

from ..base import RunConfigCommand


class Command(RunConfigCommand):
    help = 'Dump the synthetic dataset described by the run configuration.'

    def handle(self, *args, **options):
        cfg = self.run_config(options)
        frontend = build_frontend(cfg.scene_kind, cfg.trajectory_kind, cfg.n_keyframes, cfg.K, cfg.noise, cfg.seed,
                                  cfg.graph_stride)
        out = dump_dataset(cfg.out_dir, frontend, cfg.tracker.init_edge_span)
        self.stdout.write(f"dataset written to {out}")
