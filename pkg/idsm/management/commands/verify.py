"""
Re-check the invariants of a reconstruction bundle.

    $ ./manage.py verify --out runs/example1
"""
from django.core.management.base import BaseCommand
from django.core.management.base import CommandError

from ...exceptions import VerificationError
from ...verification import verify_bundle
from ..base import FAILED


class Command(BaseCommand):

    """Management command to audit a finished reconstruction."""

    help = "Verify solve counts, damping, box constraints and the resolver bound"

    def add_arguments(self, parser):
        parser.add_argument(
            "--out", required=True, help="Directory of the reconstruction bundle"
        )

    def handle(self, *args, **options):
        try:
            results = verify_bundle(options["out"])
        except VerificationError as error:
            raise CommandError("Failed invariant %s" % error, returncode=FAILED)

        for invariant, status in results:
            self.stdout.write("%-22s %s" % (invariant, status))
        self.stdout.write(self.style.SUCCESS("All invariants hold"))
