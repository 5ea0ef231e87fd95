"""Configure Django for pytest the same way tox's testenv does."""
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings.testing")
os.environ.setdefault("DJANGO_SETTINGS_SKIP_LOCAL", "True")
django.setup()
