from django.core.management.base import BaseCommand, CommandError

from Deskslam.exceptions import DeskslamError

from ..forms import RunConfigForm


class RunConfigCommand(BaseCommand):
    """A command configured by --config/--seed/--stages/--out/--dump-traj.

    A DeskslamError leaves the process with that error's exit code.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='key=value file overriding settings')
        parser.add_argument('--seed', help='unsigned 64-bit seed')
        parser.add_argument('--stages', help='comma-separated subset of tracking,pgba,full_ba,refine')
        parser.add_argument('--out', help='output directory')
        parser.add_argument('--dump-traj', action='store_true',
                            help='write the live trajectory after every keyframe')

    def run_config(self, options):
        form = RunConfigForm({name: options.get(name) for name in RunConfigForm.base_fields})
        return form.save()

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except DeskslamError as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=exc.exit_code) from exc
