from django.apps import AppConfig


class TrackingConfig(AppConfig):
    name = 'tracker'
    verbose_name = 'Tracking'
