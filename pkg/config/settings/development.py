from .base import *  # noqa


INSTALLED_APPS += ["django_extensions"]

LOGGING["loggers"]["idsm"]["level"] = "DEBUG"
