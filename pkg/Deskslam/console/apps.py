from django.apps import AppConfig


class ConsoleConfig(AppConfig):
    name = 'console'
    verbose_name = 'Console'

    def ready(self):
        from . import checks  # noqa: F401
