import io
import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.core.checks import run_checks
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from Deskslam.exceptions import ConfigurationError
from Deskslam.tests import write_config
from geom.io import read_tum

from .checks import published_default_drift
from .forms import MAX_SEED, RunConfigForm


def quiet(name, *args, **options):
    """call_command with the output swallowed; returns the exit code."""
    try:
        call_command(name, *args, stdout=io.StringIO(), stderr=io.StringIO(), **options)
    except CommandError as exc:
        return exc.returncode
    return 0


class RunConfigFormTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = write_config(self.tmp.name, FLOW_SIGMA=0.25, SEED=11, STAGES='tracking,pgba')

    def form(self, **data):
        return RunConfigForm({'config': str(self.config), **data})

    def test_file_overrides_settings(self):
        cfg = self.form().save()
        self.assertEqual(cfg.noise.flow_sigma, 0.25)
        self.assertEqual(cfg.seed, 11)
        self.assertEqual(cfg.stages, ('tracking', 'pgba'))
        self.assertEqual((cfg.K.width, cfg.K.height), (64, 48))
        self.assertEqual(cfg.tracker.window, settings.WINDOW)
        self.assertEqual(cfg.config_path, self.config)

    def test_flags_override_file(self):
        cfg = self.form(seed='5', stages='refine,tracking', out=self.tmp.name).save()
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.stages, ('tracking', 'refine'))
        self.assertEqual(cfg.out_dir, Path(self.tmp.name))
        self.assertTrue(cfg.enabled('refine'))
        self.assertFalse(cfg.enabled('pgba'))

    def test_without_a_file_settings_apply(self):
        cfg = RunConfigForm({}).save()
        self.assertEqual(cfg.seed, settings.SEED)
        self.assertEqual(cfg.n_keyframes, settings.N_KEYFRAMES)
        self.assertEqual(cfg.weights.lambda_c, settings.LAMBDA_C)

    def test_seed_range(self):
        self.assertEqual(self.form(seed=str(MAX_SEED)).save().seed, MAX_SEED)
        for seed in ('-1', str(MAX_SEED + 1), 'abc'):
            form = self.form(seed=seed)
            self.assertFalse(form.is_valid(), seed)
            self.assertIn('seed', form.errors)

    def test_unknown_stage(self):
        form = self.form(stages='tracking,mapping')
        self.assertFalse(form.is_valid())
        self.assertIn('mapping', form.errors['stages'][0])

    def test_tracking_is_required(self):
        form = self.form(stages='pgba,full_ba')
        self.assertFalse(form.is_valid())
        self.assertIn('__all__', form.errors)

    def test_missing_file(self):
        form = RunConfigForm({'config': str(Path(self.tmp.name) / 'absent.cfg')})
        self.assertFalse(form.is_valid())
        self.assertIn('config', form.errors)
        with self.assertRaises(ConfigurationError):
            form.save()

    def test_bad_values_in_the_file(self):
        for key, value in (('FLOW_SIGMA', 'abc'), ('SCENE_KIND', 'garden'), ('TRAJECTORY_KIND', 'spiral'),
                           ('N_KEYFRAMES', '1')):
            config = write_config(self.tmp.name, **{key: value})
            form = RunConfigForm({'config': str(config)})
            self.assertFalse(form.is_valid(), key)
            self.assertIn('__all__', form.errors)

    def test_boolean_keys(self):
        config = write_config(self.tmp.name, JDSA='False', ONLINE_LOOPS='True')
        cfg = RunConfigForm({'config': str(config), 'dump_traj': True}).save()
        self.assertFalse(cfg.tracker.jdsa)
        self.assertTrue(cfg.online_loops)
        self.assertTrue(cfg.dump_traj)


class SystemCheckTests(SimpleTestCase):

    def test_defaults_pass(self):
        self.assertEqual(published_default_drift(), [])
        self.assertEqual(run_checks(tags=['deskslam']), [])

    @override_settings(N_INIT=10, LAMBDA_S=1.0)
    def test_drift_is_an_error(self):
        self.assertEqual(published_default_drift(), ['N_INIT', 'LAMBDA_S'])
        errors = run_checks(tags=['deskslam'])
        self.assertEqual([e.id for e in errors], ['deskslam.E001', 'deskslam.E001'])
        self.assertIn('N_INIT=10', errors[0].msg)

    @override_settings(STAGES=['pgba', 'mapping'])
    def test_bad_stages_setting(self):
        ids = sorted(e.id for e in run_checks(tags=['deskslam']))
        self.assertEqual(ids, ['deskslam.E002', 'deskslam.E003'])


class CommandTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.out = self.root / 'run'

    def test_check(self):
        self.assertEqual(quiet('check'), 0)

    @override_settings(N_INIT=10)
    def test_check_exits_with_two_on_drift(self):
        self.assertEqual(quiet('check'), 2)

    def test_bad_config_exits_with_two(self):
        self.assertEqual(quiet('run', config=str(self.root / 'absent.cfg')), 2)
        self.assertEqual(quiet('run', seed='-3', out=str(self.out)), 2)

    def test_eval_outside_a_run_directory(self):
        self.assertEqual(quiet('eval', out=str(self.root)), 4)

    def test_gen(self):
        config = write_config(self.root, N_KEYFRAMES=14)
        self.assertEqual(quiet('gen', config=str(config), out=str(self.out)), 0)
        self.assertTrue((self.out / 'scene.cfg').is_file())

    def test_failed_stage_sets_the_exit_code(self):
        config = write_config(self.root, N_KEYFRAMES=6)
        self.assertEqual(quiet('run', config=str(config), out=str(self.out), stages='tracking'), 1)
        self.assertTrue((self.out / 'report.json').is_file())

    def test_run_then_eval(self):
        config = write_config(self.root)
        options = {'config': str(config), 'out': str(self.out)}
        self.assertEqual(quiet('run', stages='tracking', dump_traj=True, **options), 0)
        self.assertTrue((self.out / 'live_traj.txt').is_file())
        self.assertEqual(quiet('eval', **options), 0)
        report = json.loads((self.out / 'report.json').read_text())
        evaluation = json.loads((self.out / 'eval.json').read_text())
        self.assertIsNone(evaluation['pgba'])
        self.assertAlmostEqual(evaluation['tracking']['ate_sim3'], report['stages']['tracking']['ate_sim3'],
                               places=6)

        dataset = self.root / 'data'
        self.assertEqual(quiet('gen', config=str(config), out=str(dataset)), 0)
        self.assertEqual(quiet('eval', gt=str(dataset), **options), 0)
        from_dataset = json.loads((self.out / 'eval.json').read_text())
        self.assertAlmostEqual(from_dataset['tracking']['ate_sim3'], evaluation['tracking']['ate_sim3'], places=9)

    def test_run_all_stages_then_render(self):
        config = write_config(self.root)
        options = {'config': str(config), 'out': str(self.out)}
        self.assertEqual(quiet('run', **options), 0)
        report = json.loads((self.out / 'report.json').read_text())
        for stage in ('tracking', 'pgba', 'full_ba', 'refine'):
            self.assertIsNotNone(report['stages'][stage], stage)
        self.assertGreater(report['map']['n_gaussians'], 0)
        self.assertIsNotNone(report['depth']['rendered'])
        self.assertEqual(len(report['psnr']['per_keyframe']), report['stages']['refine']['n_keyframes'])
        self.assertTrue((self.out / 'map.ply').is_file())
        self.assertTrue((self.out / 'render' / 'kf_0000.ppm').is_file())

        self.assertEqual(quiet('render', **options), 0)
        ids, _ = read_tum(self.out / 'traj_refine.txt')
        self.assertEqual(len(list((self.out / 'novel').glob('view_*.ppm'))), len(ids) - 1)
