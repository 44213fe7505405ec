from django.apps import AppConfig


class GsmapConfig(AppConfig):
    name = 'gsmap'
    verbose_name = 'Gaussian Map'
