from django.core.management.base import CommandError
from django.core.management.commands import check

from Deskslam.exceptions import ConfigurationError


class Command(check.Command):
    """Django's check; a failed system check exits with the configuration-error code."""

    def handle(self, *app_labels, **options):
        try:
            return super().handle(*app_labels, **options)
        except CommandError as exc:
            raise CommandError(str(exc), returncode=ConfigurationError.exit_code) from exc
