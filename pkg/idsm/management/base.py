"""Shared pieces of the IDSM management commands."""
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand
from django.core.management.base import CommandError

from ..config import list_presets
from ..config import load_run_config
from ..exceptions import IdsmError


# Exit codes
INVALID_CONFIG = 2
DATA_MISMATCH = 3
FAILED = 1


class IdsmCommand(BaseCommand):

    """Loads run configurations and turns library errors into exit codes."""

    def add_config_argument(self, parser):
        parser.add_argument(
            "--config",
            required=True,
            help="Path to a configuration file or one of the presets: %s"
            % ", ".join(list_presets()),
        )

    def load_config(self, name_or_path, **overrides):
        try:
            return load_run_config(name_or_path, **overrides)
        except ValidationError as error:
            raise CommandError("; ".join(error.messages), returncode=INVALID_CONFIG)
        except IdsmError as error:
            raise CommandError(str(error), returncode=INVALID_CONFIG)
