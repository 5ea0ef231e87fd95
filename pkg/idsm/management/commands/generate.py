"""
Synthesize boundary measurements for a configuration.

    $ ./manage.py generate --config example1 --out data/example1
"""
from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from ...exceptions import IdsmError
from ...workflow import generate
from ..base import FAILED
from ..base import IdsmCommand
from ..base import INVALID_CONFIG


class Command(IdsmCommand):

    """Management command to write a data bundle of noisy boundary measurements."""

    help = "Synthesize noisy partial boundary data from the configured inclusions"

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument(
            "--out", required=True, help="Directory of the data bundle to write"
        )
        parser.add_argument(
            "--seed",
            type=int,
            default=None,
            help="Override the noise seed of the config",
        )

    def handle(self, *args, **options):
        config = self.load_config(options["config"], seed=options["seed"])
        try:
            _setup, data = generate(config, out=options["out"])
        except ValidationError as error:
            raise CommandError("; ".join(error.messages), returncode=INVALID_CONFIG)
        except IdsmError as error:
            raise CommandError(str(error), returncode=FAILED)

        self.stdout.write(
            self.style.SUCCESS(
                "Wrote %s datasets (noise=%s, seed=%s) to %s"
                % (len(data), config.noise, config.seed, options["out"])
            )
        )
