"""
Production Django settings for the IDSM reconstruction project.

This is meant to be customized by setting environment variables.

Only a few environment variables are required:

- SECRET_KEY
- DATABASE_URL (optional, defaults to a local sqlite file)

Setting SENTRY_DSN reports failed reconstructions to Sentry.
"""
import logging

from .base import *  # noqa
from .base import env


# Django Settings
# https://docs.djangoproject.com/en/4.2/ref/settings/
# --------------------------------------------------------------------------
DEBUG = False
SECRET_KEY = env("SECRET_KEY")  # Django won't start unless the SECRET_KEY is non-empty


# Sentry settings for error reporting
# https://docs.sentry.io/platforms/python/django/
# --------------------------------------------------------------------------
SENTRY_DSN = env("SENTRY_DSN", default=None)
if SENTRY_DSN:
    # pylint: disable=import-error
    import sentry_sdk
    from sentry_sdk.integrations.django import DjangoIntegration
    from sentry_sdk.integrations.logging import LoggingIntegration

    sentry_logging = LoggingIntegration(
        level=logging.INFO,  # Capture info and above as breadcrumbs
        event_level=logging.ERROR,  # Send errors as events
    )
    sentry_sdk.init(
        dsn=SENTRY_DSN,
        integrations=[sentry_logging, DjangoIntegration()],
        release=IDSM_VERSION,
    )
