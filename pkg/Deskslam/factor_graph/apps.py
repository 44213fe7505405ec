from django.apps import AppConfig


class FactorGraphConfig(AppConfig):
    name = 'factor_graph'
    verbose_name = 'Factor Graph'
