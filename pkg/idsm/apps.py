"""IDSM Django app settings."""
from django.apps import AppConfig


class IdsmConfig(AppConfig):
    name = "idsm"
    verbose_name = "Iterative Direct Sampling"
