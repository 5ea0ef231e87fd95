"""Problem presets, ground-truth inclusions, and synthetic measurements."""
import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .constants import CE
from .constants import CONDUCTIVITY
from .constants import DISK
from .constants import DOT
from .constants import EIT
from .constants import ELLIPSE
from .constants import MIXED
from .constants import MODULUS
from .constants import POLYGON
from .constants import POTENTIAL
from .constants import SHAPES
from .expressions import Expression
from .fem import BoundaryField
from .fem import FeField
from .fem import get_solver
from .fem import InclusionType
from .fem import ProblemSpec
from .fem import validate_inclusions
from .mesh import prolong
from .mesh import refine


log = logging.getLogger(__name__)  # noqa

# Diagonal exponents by inclusion kind
GAMMAS = {CONDUCTIVITY: 4.0, POTENTIAL: 2.0, MIXED: 3.0}

# Named boundary fluxes
FLUXES = {
    "sin": "sin(4*pi*x1) + 0.5",
    "cos": "cos(4*pi*x2) + 0.5",
    "ce1": "1.1 - x2**2",
    "ce2": "x2**2",
    "square": "x1**2",
}

# Points sampled on curved outlines for containment and overlap checks
OUTLINE_POINTS = 256


def _conductivity():
    return InclusionType(
        "conductivity", CONDUCTIVITY, -0.99, 0.0, GAMMAS[CONDUCTIVITY]
    )


def make_problem(tag, gammas=None):
    """
    The model ``tag`` with its background and admissible boxes.

    :param gammas: optional exponents overriding the defaults, one per type
    """
    if tag == EIT:
        problem = ProblemSpec(EIT, (_conductivity(),))
    elif tag == DOT:
        problem = ProblemSpec(
            DOT,
            (
                _conductivity(),
                InclusionType("potential", POTENTIAL, 0.0, 19.0, GAMMAS[POTENTIAL]),
            ),
            c0=1.0,
            p0=1.0,
        )
    elif tag == CE:
        problem = ProblemSpec(
            CE, (InclusionType("ischemia", MIXED, 0.0, 1.0, GAMMAS[MIXED]),)
        )
    elif tag == MODULUS:
        problem = ProblemSpec(
            MODULUS,
            (InclusionType("potential", POTENTIAL, 0.0, 60.0, GAMMAS[POTENTIAL]),),
        )
    else:
        raise ValidationError(
            "Unknown model %(tag)s", params={"tag": tag}, code="model"
        )

    if gammas:
        if len(gammas) != len(problem.types):
            raise ValidationError("One exponent per inclusion type", code="gamma")
        types = tuple(
            inclusion._replace(gamma=float(gamma))
            for inclusion, gamma in zip(problem.types, gammas)
        )
        problem = ProblemSpec(problem.model, types, c0=problem.c0, p0=problem.p0)
    return problem


@dataclass(frozen=True)
class InclusionShape:

    """
    One inclusion with its amplitude per inclusion type.

    Disks use ``radii=(r,)``, ellipses ``radii=(rx, ry)`` rotated by ``angle``,
    polygons their counterclockwise ``vertices``.
    """

    kind: str
    amplitudes: tuple
    center: tuple = (0.0, 0.0)
    radii: tuple = ()
    angle: float = 0.0
    vertices: tuple = ()

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValidationError(
                "Unknown shape %(kind)s", params={"kind": self.kind}, code="shape"
            )
        expected = {DISK: 1, ELLIPSE: 2}.get(self.kind)
        if expected is not None and (
            len(self.radii) != expected or min(self.radii) <= 0
        ):
            raise ValidationError(
                "A %(kind)s needs %(count)s positive radii",
                params={"kind": self.kind, "count": expected},
                code="shape",
            )
        if self.kind == POLYGON and len(self.vertices) < 3:
            raise ValidationError("A polygon needs three vertices", code="shape")
        if self.extent() >= 1.0:
            raise ValidationError(
                "Inclusion %(shape)s is not contained in the unit disk",
                params={"shape": self},
                code="containment",
            )

    def amplitude(self, name):
        return dict(self.amplitudes).get(name, 0.0)

    def outline(self, count=OUTLINE_POINTS):
        """Points on the outline of the shape."""
        if self.kind == POLYGON:
            corners = np.asarray(self.vertices, dtype=float)
            following = np.roll(corners, -1, axis=0)
            steps = np.linspace(0.0, 1.0, max(count // len(corners), 2), endpoint=False)
            return np.vstack(
                [a + steps[:, None] * (b - a) for a, b in zip(corners, following)]
            )
        theta = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
        rx, ry = (self.radii[0], self.radii[0]) if self.kind == DISK else self.radii
        local = np.stack([rx * np.cos(theta), ry * np.sin(theta)], axis=1)
        cos, sin = np.cos(self.angle), np.sin(self.angle)
        rotation = np.array([[cos, -sin], [sin, cos]])
        return local @ rotation.T + np.asarray(self.center, dtype=float)

    def extent(self):
        """Largest distance of the shape from the origin."""
        if self.kind == DISK:
            return float(np.hypot(*self.center) + self.radii[0])
        return float(np.linalg.norm(self.outline(), axis=1).max())

    def contains(self, points):
        """Whether every point lies in the closed shape."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if self.kind == POLYGON:
            return _inside_polygon(points, np.asarray(self.vertices, dtype=float))
        offset = points - np.asarray(self.center, dtype=float)
        if self.kind == DISK:
            return np.hypot(offset[:, 0], offset[:, 1]) <= self.radii[0]
        cos, sin = np.cos(self.angle), np.sin(self.angle)
        u = cos * offset[:, 0] + sin * offset[:, 1]
        v = -sin * offset[:, 0] + cos * offset[:, 1]
        return (u / self.radii[0]) ** 2 + (v / self.radii[1]) ** 2 <= 1.0


def _inside_polygon(points, vertices):
    """Even-odd ray casting, vectorized over the points."""
    inside = np.zeros(len(points), dtype=bool)
    px, py = points[:, 0], points[:, 1]
    for (x1, y1), (x2, y2) in zip(vertices, np.roll(vertices, -1, axis=0)):
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < at)
    return inside


def check_disjoint(shapes, names):
    """Shapes sharing an inclusion type must not overlap."""
    for name in names:
        active = [shape for shape in shapes if shape.amplitude(name) != 0.0]
        for index, first in enumerate(active):
            for second in active[index + 1 :]:
                probes = np.vstack(
                    [
                        first.outline(),
                        np.atleast_2d(first.center),
                        np.atleast_2d(second.center),
                    ]
                )
                if np.any(first.contains(probes) & second.contains(probes)) or np.any(
                    first.contains(second.outline())
                ):
                    raise ValidationError(
                        "Inclusions of type %(name)s overlap",
                        params={"name": name},
                        code="overlap",
                    )


def rasterize(shapes, mesh, names):
    """
    Nodal inclusion fields, one per type name.

    A node inside a shape takes the shape's amplitude for that type.
    """
    check_disjoint(shapes, names)
    fields = []
    for name in names:
        values = np.zeros(mesh.node_count)
        for shape in shapes:
            amplitude = shape.amplitude(name)
            if amplitude != 0.0:
                values[shape.contains(mesh.nodes)] = amplitude
        fields.append(FeField(mesh, values, name=f"u_{name}"))
    return fields


def evaluate_flux(expression, mesh, name="f"):
    """A flux expression (or the name of a built-in one) on the boundary nodes."""
    text = FLUXES.get(expression, expression)
    values = Expression(text)(mesh.nodes[mesh.boundary_nodes])
    return BoundaryField(mesh, values, name=name)


def synthesize_data(problem, u_star, f, eps, seed, partition=None, **kwargs):
    """
    Noisy boundary measurements of the true inclusions.

    The scattered part ``y(u*) - y(0)`` is computed on a refinement of the
    reconstruction mesh and added to the background trace of the
    reconstruction mesh, with relative noise ``eps`` drawn from ``seed``.

    :param u_star: true inclusion fields on the reconstruction mesh or on ``fine_mesh``
    :param partition: keep the accessible part only; ``None`` keeps everything
    :param fine_mesh: the refined mesh (defaults to ``refine(f.mesh)``)
    :param fine_flux: the flux on ``fine_mesh`` (defaults to interpolating ``f``)
    """
    if eps < 0:
        raise ValidationError("The noise level must be nonnegative", code="noise")
    mesh = f.mesh
    fine = kwargs.get("fine_mesh") or refine(mesh)
    fine_flux = kwargs.get("fine_flux")
    if fine_flux is None:
        fine_flux = BoundaryField.from_nodal(
            fine, prolong(fine, f.to_nodal()), name=f.name
        )

    fine_u = [
        field.values if field.mesh is fine else prolong(fine, field.values)
        for field in u_star
    ]
    validate_inclusions(problem, fine_u)
    zero = [np.zeros(fine.node_count)] * len(problem.types)

    fine_solver = get_solver(problem, fine)
    scattered = fine_solver.forward(fine_u, fine_flux) - fine_solver.forward(
        zero, fine_flux
    )
    background = get_solver(problem, mesh).forward(
        [np.zeros(mesh.node_count)] * len(problem.types), f
    )

    # The reconstruction nodes keep their indices in the refined mesh
    nodes = mesh.boundary_nodes
    scattered = scattered[nodes]
    delta = np.random.default_rng(seed).uniform(-1.0, 1.0, size=len(nodes))
    values = background[nodes] + (1.0 + eps * delta) * scattered
    if partition is not None:
        values = np.where(partition.dirichlet_nodes, values, 0.0)
    log.debug(
        "Synthesized %s: eps=%s seed=%s max scattering=%.3e",
        f.name,
        eps,
        seed,
        np.abs(scattered).max(),
    )
    return BoundaryField(mesh, values, name=f"y_d_{f.name}")
