import tempfile
import unittest
from pathlib import Path
from unittest import mock

from django.conf import settings
from django.test import SimpleTestCase, override_settings

from console.checks import published_default_drift
from console.forms import RunConfigForm
from metrics.report import read_report

from .exceptions import (ConfigurationError, ContainerFormatError, DeskslamError, DivergenceError, EmptyMaskError,
                         InitializationError, StorageError)
from .pipeline import exit_code, run_pipeline

TINY = {
    'IMAGE_WIDTH': 64,
    'IMAGE_HEIGHT': 48,
    'FOCAL': 55.0,
    'GRAPH_STRIDE': 2,
    'MAP_STRIDE': 4,
    'N_KEYFRAMES': 50,
    'D_FLOW': 0.5,
    'OVERLAP_FLOW_FACTOR': 100.0,
    'FLOW_SIGMA': 0.0,
    'PRIOR_NOISE_SIGMA': 0.0,
    'DOWNSAMPLE_PSI': 4,
    'MAP_ITERS_PER_KEYFRAME': 1,
    'REFINE_ITERS': 4,
}
DRIFT = {'FLOW_SIGMA': 0.5, 'SCALE_DRIFT_RATE': 1.01, 'YAW_DRIFT': 0.004}
REFINE_SLACK = 0.05
NOISY_PRIOR = {'FLOW_SIGMA': 0.5, 'PRIOR_NOISE_SIGMA': 0.2, 'MAP_STRIDE': 2, 'MAP_ITERS_PER_KEYFRAME': 10,
               'REFINE_ITERS': 50}


def write_config(directory, **overrides):
    values = {**TINY, **overrides}
    path = Path(directory) / 'run.cfg'
    path.write_text(''.join(f"{key}={value}\n" for key, value in values.items()), encoding='utf-8')
    return path


def run_config(directory, out, stages, seed=0, **overrides):
    form = RunConfigForm({'config': write_config(directory, **overrides), 'out': out, 'stages': stages,
                          'seed': seed})
    return form.save()


class PublishedDefaultsTests(SimpleTestCase):

    def test_defaults_are_unchanged(self):
        self.assertEqual(published_default_drift(), [])

    def test_values(self):
        self.assertEqual(settings.N_INIT, 12)
        self.assertEqual((settings.SCALE_GRID_ROWS, settings.SCALE_GRID_COLS), (2, 2))
        weights = (settings.LAMBDA_C, settings.LAMBDA_D, settings.LAMBDA_N, settings.LAMBDA_S)
        self.assertEqual(weights, (0.95, 0.25, 0.1, 10.0))
        self.assertEqual(settings.DOWNSAMPLE_PSI, 32)
        self.assertEqual((settings.DAMPING_EPSILON, settings.DAMPING_LAMBDA), (1e-4, 0.1))
        self.assertEqual(settings.MAP_ITERS_PER_KEYFRAME, 10)
        self.assertEqual((settings.PRUNE_INTERVAL, settings.OPACITY_RESET_INTERVAL), (150, 500))

    @override_settings(N_INIT=10)
    def test_drift_is_reported(self):
        self.assertEqual(published_default_drift(), ['N_INIT'])


class TrackingOnlyTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.out = Path(cls.tmp.name) / 'run'
        cls.report = run_pipeline(run_config(cls.tmp.name, cls.out, 'tracking'))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_only_tracking_is_reported(self):
        stages = self.report['stages']
        self.assertIsNotNone(stages['tracking'])
        self.assertEqual([stages[s] for s in ('pgba', 'full_ba', 'refine')], [None, None, None])
        self.assertEqual(self.report['failures'], [])
        self.assertEqual(exit_code(self.report), 0)

    def test_outputs(self):
        self.assertTrue((self.out / 'traj_tracking.txt').is_file())
        self.assertTrue((self.out / 'gt_traj.txt').is_file())
        self.assertFalse((self.out / 'map.ply').exists())
        self.assertEqual(read_report(self.out / 'report.json')['seed'], 0)

    def test_schema_is_complete(self):
        report = read_report(self.out / 'report.json')
        self.assertEqual(set(report), {'seed', 'stages', 'depth', 'psnr', 'loops', 'map', 'failures'})
        self.assertEqual(set(report['depth']), {'prior_single', 'prior_grid', 'ba', 'jdsa', 'rendered'})
        self.assertIsNone(report['depth']['rendered'])
        self.assertIsNone(report['depth']['ba'])
        self.assertIsNotNone(report['depth']['jdsa'])
        self.assertIsNone(report['psnr'])

    def test_noise_free_tracking_is_accurate(self):
        entry = self.report['stages']['tracking']
        self.assertEqual(entry['n_keyframes'], 50)
        self.assertLess(entry['ate_sim3'], 1e-3)


class DriftRunTests(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        cls.outs = [root / 'a', root / 'b']
        cls.reports = [run_pipeline(run_config(root, out, 'tracking,pgba,full_ba,refine', seed=3, **DRIFT))
                       for out in cls.outs]

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_runs(self):
        self.assertEqual(self.reports[0]['failures'], [])
        self.assertIsNotNone(self.reports[0]['stages']['refine'])

    def test_same_seed_same_bytes(self):
        for name in ('report.json', 'traj_tracking.txt', 'traj_pgba.txt', 'traj_full_ba.txt', 'traj_refine.txt',
                     'map.ply'):
            a, b = (out / name for out in self.outs)
            self.assertEqual(a.read_bytes(), b.read_bytes(), name)

    def test_loop_is_detected(self):
        loops = self.reports[0]['loops']
        self.assertIn(0, [c['i'] for c in loops['candidates']])
        self.assertGreater(loops['n_loop_edges'], 0)
        self.assertEqual(len(loops['pgba_runs']), 1)

    def test_loop_closing_reduces_drift(self):
        stages = self.reports[0]['stages']
        self.assertLess(stages['pgba']['ate_sim3'], stages['tracking']['ate_sim3'])

    def test_each_stage_keeps_or_lowers_the_error(self):
        stages = self.reports[0]['stages']
        ates = [stages[s]['ate_sim3'] for s in ('tracking', 'pgba', 'full_ba', 'refine')]
        self.assertLessEqual(ates[1], ates[0])
        self.assertLessEqual(ates[2], ates[1])
        # a few photometric steps move poses by at most the pose learning rate
        self.assertLessEqual(ates[3], ates[2] * (1.0 + REFINE_SLACK))


class DepthOrderingTests(unittest.TestCase):
    """Abs Rel of every depth source on one noisy-prior scene, JDSA on and off."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        cls.aligned = run_pipeline(run_config(root, root / 'jdsa', 'tracking,refine', seed=2, **NOISY_PRIOR))
        cls.geometric = run_pipeline(run_config(root, root / 'ba', 'tracking', seed=2, JDSA=False, **NOISY_PRIOR))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_runs(self):
        self.assertEqual(self.aligned['failures'], [])
        self.assertEqual(self.geometric['failures'], [])
        self.assertIsNone(self.geometric['depth']['jdsa'])

    def test_abs_rel_ordering(self):
        depth = self.aligned['depth']
        ordered = [
            ('rendered', depth['rendered']),
            ('jdsa', depth['jdsa']),
            ('ba', self.geometric['depth']['ba']),
            ('prior_grid', depth['prior_grid']),
            ('prior_single', depth['prior_single']),
        ]
        for (better, a), (worse, b) in zip(ordered, ordered[1:]):
            self.assertLess(a['abs_rel'], b['abs_rel'], f"{better} vs {worse}")


class FailureTests(unittest.TestCase):

    def test_too_short_sequence_is_recorded(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'run'
            report = run_pipeline(run_config(tmp, out, 'tracking,pgba', N_KEYFRAMES=6))
            self.assertEqual(len(report['failures']), 1)
            failure = report['failures'][0]
            self.assertEqual((failure['stage'], failure['error']), ('tracking', 'InitializationError'))
            self.assertEqual(exit_code(report), 1)
            self.assertEqual(read_report(out / 'report.json')['failures'], report['failures'])

    def test_evaluation_failure_still_writes_the_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'run'
            cfg = run_config(tmp, out, 'tracking', N_KEYFRAMES=16)
            with mock.patch('Deskslam.pipeline.depth_metrics', side_effect=EmptyMaskError('no valid pixels')):
                report = run_pipeline(cfg)
            self.assertEqual([f['stage'] for f in report['failures']], ['evaluate'])
            self.assertEqual(report['failures'][0]['error'], 'EmptyMaskError')
            self.assertEqual(exit_code(report), 1)
            written = read_report(out / 'report.json')
            self.assertIsNotNone(written['stages']['tracking'])
            self.assertEqual(written['failures'], report['failures'])
            self.assertTrue((out / 'gt_traj.txt').is_file())


class ExitCodeTests(unittest.TestCase):

    def test_codes(self):
        self.assertEqual(DeskslamError.exit_code, 1)
        self.assertEqual(InitializationError.exit_code, 1)
        self.assertEqual(ConfigurationError.exit_code, 2)
        self.assertEqual(DivergenceError.exit_code, 3)
        self.assertEqual(StorageError.exit_code, 4)
        self.assertEqual(ContainerFormatError.exit_code, 4)

    def test_first_failure_wins(self):
        report = {'failures': [{'exit_code': 3}, {'exit_code': 4}]}
        self.assertEqual(exit_code(report), 3)
        self.assertEqual(exit_code({'failures': []}), 0)
