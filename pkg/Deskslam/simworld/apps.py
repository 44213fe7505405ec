from django.apps import AppConfig


class SimworldConfig(AppConfig):
    name = 'simworld'
    verbose_name = 'Synthetic World'
