"""
Reconstruct inclusions from a data bundle.

    $ ./manage.py reconstruct --config example1 --data data/example1 --out runs/example1
"""
from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from ...constants import SCHEMES
from ...exceptions import DataMismatchError
from ...exceptions import IdsmError
from ...workflow import reconstruct
from ..base import DATA_MISMATCH
from ..base import FAILED
from ..base import IdsmCommand
from ..base import INVALID_CONFIG


class Command(IdsmCommand):

    """Management command to run the iterative direct sampling method."""

    help = "Reconstruct inclusions from partial boundary data"

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument(
            "--data", required=True, help="Directory of the data bundle"
        )
        parser.add_argument(
            "--out",
            required=True,
            help="Directory of the reconstruction bundle to write",
        )
        parser.add_argument(
            "--scheme",
            choices=SCHEMES,
            default=None,
            help="Override the correction scheme",
        )
        parser.add_argument(
            "--vtk",
            action="store_true",
            help="Also write legacy VTK files per iteration",
        )
        parser.add_argument(
            "--seed", type=int, default=None, help="Seed of the resolver bound probes"
        )
        parser.add_argument(
            "--max-iter",
            type=int,
            default=None,
            dest="max_iterations",
            help="Override the number of iterations",
        )

    def handle(self, *args, **options):
        config = self.load_config(
            options["config"],
            scheme=options["scheme"],
            max_iterations=options["max_iterations"],
        )
        try:
            reconstruction = reconstruct(
                config,
                options["data"],
                out=options["out"],
                vtk=options["vtk"],
                probe_seed=options["seed"],
            )
        except DataMismatchError as error:
            raise CommandError(str(error), returncode=DATA_MISMATCH)
        except ValidationError as error:
            raise CommandError("; ".join(error.messages), returncode=INVALID_CONFIG)
        except IdsmError as error:
            raise CommandError(str(error), returncode=FAILED)

        last = reconstruction.history[-1]
        self.stdout.write(
            "Lambda trace: %s"
            % ", ".join(
                "-" if record.lam is None else "%.6g" % record.lam
                for record in reconstruction.history[1:]
            )
        )
        self.stdout.write(
            self.style.SUCCESS(
                "Finished %s iterations with %s PDE solves (residuals %s)"
                % (
                    reconstruction.iterations_done,
                    last.solve_count,
                    ", ".join("%.6g" % value for value in last.residuals),
                )
            )
        )
