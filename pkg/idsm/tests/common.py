import math
import textwrap

from django.test import override_settings
from django.test import SimpleTestCase

from ..dtn import HrDtnParams
from ..fem import BoundaryField
from ..fem import FeField
from ..iteration import RunConfig
from ..mesh import build_coarse_map
from ..mesh import build_disk_mesh
from ..mesh import partition_boundary
from ..models import evaluate_flux
from ..models import make_problem


# Small enough for every test to solve in well under a second
FINE_TARGET = 384
COARSE_TARGET = 54

RIGHT_HALF = ((-math.pi / 2, math.pi / 2),)

SMALL_CONFIG = textwrap.dedent(
    """
    [problem]
    model = {model}

    [mesh]
    fine = 384
    coarse = 54

    [boundary]
    arcs = -pi/2, pi/2

    [fluxes]
    {fluxes}

    [hrdtn]
    alpha_d = 0.05
    alpha_n = 2.0

    [resolver]
    scheme = bfg
    p = 2

    [run]
    iterations = {iterations}
    noise = 0.15
    seed = 0

    [truth]
    {truth}
    """
)
TRUTHS = {
    "EIT": "inclusion = kind=disk; center=0.4, 0.0; radii=0.3; conductivity=-0.9",
    "DOT": (
        "near = kind=disk; center=0.4, 0.0; radii=0.3; conductivity=-0.9\n"
        "far = kind=disk; center=-0.4, 0.0; radii=0.3; potential=9"
    ),
    "CE": "region = kind=disk; center=0.3, 0.3; radii=0.3; ischemia=1",
    "MODULUS": "region = kind=disk; center=0.0, 0.4; radii=0.3; potential=40",
}
FLUXES = {
    "EIT": "f1 = sin\nf2 = cos",
    "DOT": "f1 = sin\nf2 = cos",
    "CE": "f1 = ce1\nf2 = ce2",
    "MODULUS": "f1 = square",
}


def small_config_text(model="EIT", iterations=3):
    return SMALL_CONFIG.format(
        model=model,
        iterations=iterations,
        fluxes=FLUXES[model],
        truth=TRUTHS[model],
    )


@override_settings(IDSM_PROBE_COUNT=5)
class IdsmTestCase(SimpleTestCase):

    """Shares the small meshes between the tests of a class."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.mesh = build_disk_mesh(FINE_TARGET)
        cls.coarse_mesh = build_disk_mesh(COARSE_TARGET)
        cls.coarse_map = build_coarse_map(cls.mesh, cls.coarse_mesh)
        cls.partition = partition_boundary(cls.mesh, RIGHT_HALF)
        cls.full_partition = partition_boundary(cls.mesh, ((0.0, 2 * math.pi),))
        cls.params = HrDtnParams(0.05, 2.0)

    def zeros(self, problem):
        return [FeField.zeros(self.mesh, name=name) for name in problem.type_names]

    def flux(self, name="sin"):
        return evaluate_flux(name, self.mesh, name=name)

    def boundary_field(self, values):
        return BoundaryField(self.mesh, values)

    def random_fields(self, problem, rng, scale=0.1):
        """Fields inside the boxes, away from the bounds."""
        fields = []
        for name, (lower, upper) in zip(problem.type_names, problem.boxes):
            middle = 0.5 * (lower + upper)
            spread = scale * (upper - lower)
            values = middle + spread * rng.uniform(-1.0, 1.0, self.mesh.node_count)
            fields.append(FeField(self.mesh, values, name=name))
        return fields

    def run_config(self, model="EIT", **kwargs):
        values = {
            "problem": make_problem(model),
            "fine_target": FINE_TARGET,
            "coarse_target": COARSE_TARGET,
            "arcs": RIGHT_HALF,
            "fluxes": ("sin", "cos"),
            "params": self.params,
            "max_iterations": 3,
            "noise": 0.0,
        }
        values.update(kwargs)
        return RunConfig(**values)
