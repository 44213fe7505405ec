from django.core.management.base import CommandError

from Deskslam.pipeline import exit_code, run_pipeline
from metrics.report import STAGES

from ..base import RunConfigCommand


class Command(RunConfigCommand):
    help = 'Run the enabled pipeline stages and write report.json.'

    def handle(self, *args, **options):
        report = run_pipeline(self.run_config(options))
        for stage in STAGES:
            entry = report['stages'][stage]
            if entry is not None:
                self.stdout.write(f"{stage:>9}: ATE {entry['ate_sim3']:.5f} m (sim3)  "
                                  f"{entry['n_keyframes']} keyframes")
        for failure in report['failures']:
            self.stderr.write(f"{failure['stage']:>9}: FAILED {failure['error']}: {failure['message']}")
        code = exit_code(report)
        if code:
            raise CommandError(f"{len(report['failures'])} stage(s) failed", returncode=code)
