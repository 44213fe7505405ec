from django.apps import AppConfig


class GeomConfig(AppConfig):
    name = 'geom'
    verbose_name = 'Geometry'
