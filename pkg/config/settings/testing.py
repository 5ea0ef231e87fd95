"""Settings used in testing."""
from .development import *  # noqa


TESTING = True
LOGGING["loggers"]["idsm"]["level"] = "ERROR"

# Keep the test database in memory
DATABASES = {"default": {"ENGINE": "django.db.backends.sqlite3", "NAME": ":memory:"}}
