#!/usr/bin/env python
"""Run the IDSM management commands (generate, reconstruct, verify)."""
import os
import sys

if __name__ == "__main__":
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings.development")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as error:
        raise ImportError(
            "Couldn't import Django. Install the requirements with "
            "`pip install -r requirements/development.txt` first."
        ) from error
    execute_from_command_line(sys.argv)
