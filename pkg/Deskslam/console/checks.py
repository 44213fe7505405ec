"""System checks run by `manage.py check` (and before `manage.py test`)."""
from django.conf import settings
from django.core import checks

from metrics.report import STAGES


def published_default_drift():
    """Names of settings that drifted away from the published defaults."""
    return [name for name, value in settings.PUBLISHED_DEFAULTS.items() if getattr(settings, name) != value]


@checks.register('deskslam')
def check_published_defaults(app_configs, **kwargs):
    return [
        checks.Error(
            f"{name}={getattr(settings, name)!r} differs from the published default "
            f"{settings.PUBLISHED_DEFAULTS[name]!r}",
            hint=f"unset {name} in .env or the environment",
            id='deskslam.E001',
        )
        for name in published_default_drift()
    ]


@checks.register('deskslam')
def check_stages(app_configs, **kwargs):
    errors = []
    unknown = sorted(set(settings.STAGES) - set(STAGES))
    if unknown:
        errors.append(checks.Error(f"STAGES names unknown stages {unknown}", id='deskslam.E002'))
    if 'tracking' not in settings.STAGES:
        errors.append(checks.Error("STAGES must include tracking", id='deskslam.E003'))
    return errors
