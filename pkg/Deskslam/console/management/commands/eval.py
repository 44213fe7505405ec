from pathlib import Path

from django.conf import settings

from Deskslam.exceptions import StorageError
from geom.io import read_tum
from metrics.evaluation import ate
from metrics.report import STAGES, write_report
from simworld.dataset import load_dataset

from ..base import RunConfigCommand


class Command(RunConfigCommand):
    help = ('ATE of every stage trajectory found in a finished run directory. Ground truth comes from '
            'the run\'s gt_traj.txt, or from a dataset dumped by `gen` when --gt names one.')

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--gt', help='dataset directory written by gen to take ground truth from')

    def handle(self, *args, **options):
        out = Path(options['out'] or settings.OUTPUT_DIR)
        if options['gt']:
            dataset = load_dataset(options['gt'])
            stamps, poses = dataset.stamps, dataset.gt_poses
        else:
            gt_path = out / 'gt_traj.txt'
            if not gt_path.is_file():
                raise StorageError(f"{out} has no gt_traj.txt; is it a run directory?")
            stamps, poses = read_tum(gt_path)
        gt = dict(zip(stamps.astype(int).tolist(), poses))
        results = {}
        for stage in STAGES:
            path = out / f'traj_{stage}.txt'
            if not path.is_file():
                results[stage] = None
                continue
            ids, est = read_tum(path)
            est = dict(zip(ids.astype(int).tolist(), est))
            results[stage] = {'ate_sim3': ate(est, gt, 'sim3'), 'ate_se3': ate(est, gt, 'se3'),
                              'n_keyframes': len(est)}
            self.stdout.write(f"{stage:>9}: ATE {results[stage]['ate_sim3']:.5f} m (sim3)  "
                              f"{results[stage]['ate_se3']:.5f} m (se3)")
        write_report(out / 'eval.json', results)
