"""P1 finite elements: fields, PDE models, assembly and solves."""
import logging
import weakref
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from .constants import CE
from .constants import DIRICHLET
from .constants import DOT
from .constants import EIT
from .constants import FULL
from .constants import INCLUSION_KINDS
from .constants import ISCHEMIC_CONDUCTIVITY
from .constants import MODELS
from .constants import MODULUS
from .constants import NEUMANN
from .exceptions import CoefficientError
from .exceptions import SolverError


log = logging.getLogger(__name__)  # noqa

# Basis values at the three edge midpoints of a triangle (rows: points)
MIDPOINT_BASIS = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


class FeField:

    """Nodal values of a P1 function on a mesh."""

    def __init__(self, mesh, values, name="field"):
        values = np.array(values, dtype=float).ravel()
        if len(values) != mesh.node_count:
            raise ValidationError(
                "%(name)s has %(count)s values for %(nodes)s nodes",
                params={"name": name, "count": len(values), "nodes": mesh.node_count},
                code="field-length",
            )
        self.mesh = mesh
        self.values = values
        self.name = name

    def __repr__(self):
        return f"<FeField {self.name} nodes={len(self.values)}>"

    @classmethod
    def zeros(cls, mesh, name="field"):
        return cls(mesh, np.zeros(mesh.node_count), name)

    def l1_norm(self):
        return lp_norm(self.mesh, self.values, 1.0)

    def max_norm(self):
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0


class BoundaryField:

    """Values on the boundary nodes of a mesh, in boundary-loop order."""

    def __init__(self, mesh, values, name="boundary"):
        values = np.array(values, dtype=float).ravel()
        if len(values) != mesh.boundary_node_count:
            raise ValidationError(
                "%(name)s has %(count)s values for %(nodes)s boundary nodes",
                params={
                    "name": name,
                    "count": len(values),
                    "nodes": mesh.boundary_node_count,
                },
                code="boundary-field-length",
            )
        self.mesh = mesh
        self.values = values
        self.name = name

    def __repr__(self):
        return f"<BoundaryField {self.name} nodes={len(self.values)}>"

    @classmethod
    def from_nodal(cls, mesh, nodal, name="boundary"):
        return cls(mesh, np.asarray(nodal, dtype=float)[mesh.boundary_nodes], name)

    def to_nodal(self):
        """A full nodal vector, zero away from the boundary."""
        nodal = np.zeros(self.mesh.node_count)
        nodal[self.mesh.boundary_nodes] = self.values
        return nodal


InclusionType = namedtuple("InclusionType", ["name", "kind", "lower", "upper", "gamma"])


@dataclass(frozen=True)
class ProblemSpec:

    """
    One of the four PDE models with its inclusion types.

    Each inclusion type carries its admissible box ``[lower, upper]`` and
    the exponent ``gamma`` of the diagonal resolver part.
    """

    model: str
    types: tuple
    c0: float = 1.0
    p0: float = 0.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValidationError(
                "Unknown model %(model)s", params={"model": self.model}, code="model"
            )
        if not self.c0 > 0:
            raise ValidationError(
                "Background conductivity must be positive", code="background"
            )
        if not self.types:
            raise ValidationError("A problem needs an inclusion type", code="types")
        names = [inclusion.name for inclusion in self.types]
        if len(set(names)) != len(names):
            raise ValidationError("Inclusion type names must be unique", code="types")
        for inclusion in self.types:
            if inclusion.kind not in INCLUSION_KINDS:
                raise ValidationError(
                    "Unknown inclusion kind %(kind)s",
                    params={"kind": inclusion.kind},
                    code="types",
                )
            if not inclusion.lower < inclusion.upper:
                raise ValidationError(
                    "Box of %(name)s must satisfy lower < upper",
                    params={"name": inclusion.name},
                    code="box",
                )
            if not inclusion.gamma > 0:
                raise ValidationError(
                    "Exponent of %(name)s must be positive",
                    params={"name": inclusion.name},
                    code="gamma",
                )

    @property
    def type_names(self):
        return tuple(inclusion.name for inclusion in self.types)

    @property
    def boxes(self):
        return tuple((inclusion.lower, inclusion.upper) for inclusion in self.types)

    @property
    def physics(self):
        return PHYSICS_BACKENDS[self.model]()

    @property
    def linear_background(self):
        """Whether the background operator A is independent of the state."""
        return self.physics.linear_background

    @property
    def semilinear(self):
        return self.physics.semilinear


class Assembler:

    """Precomputed P1 element data of one mesh."""

    def __init__(self, mesh):
        self.mesh = mesh
        corners = mesh.nodes[mesh.triangles]
        areas = mesh.triangle_areas

        # Gradients of the barycentric basis functions, constant per triangle
        edges = np.roll(corners, -1, axis=1) - np.roll(corners, 1, axis=1)
        self.gradients = np.stack([edges[:, :, 1], -edges[:, :, 0]], axis=2) / (
            2.0 * areas[:, None, None]
        )
        self.local_stiffness = areas[:, None, None] * np.einsum(
            "tid,tjd->tij", self.gradients, self.gradients
        )
        self.rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
        self.columns = np.tile(mesh.triangles, (1, 3)).ravel()

        boundary = mesh.boundary_node_count
        self.restriction = sparse.csr_matrix(
            (np.ones(boundary), (np.arange(boundary), mesh.boundary_nodes)),
            shape=(boundary, mesh.node_count),
        )

    def _matrix(self, local):
        size = self.mesh.node_count
        return sparse.csr_matrix(
            (local.ravel(), (self.rows, self.columns)), shape=(size, size)
        )

    def at_midpoints(self, nodal):
        """Interpolate nodal values to the three edge midpoints of every triangle."""
        return np.asarray(nodal)[self.mesh.triangles] @ MIDPOINT_BASIS.T

    def stiffness(self, coefficient=None):
        """Stiffness matrix with the element mean of a nodal coefficient."""
        if coefficient is None:
            return self._matrix(self.local_stiffness)
        means = np.asarray(coefficient)[self.mesh.triangles].mean(axis=1)
        return self._matrix(means[:, None, None] * self.local_stiffness)

    def mass(self, coefficient=None):
        """Mass matrix weighted by a coefficient given at the edge midpoints."""
        if coefficient is None:
            coefficient = np.ones((self.mesh.triangle_count, 3))
        weights = (self.mesh.triangle_areas / 3.0)[:, None] * coefficient
        local = np.einsum("tq,qi,qj->tij", weights, MIDPOINT_BASIS, MIDPOINT_BASIS)
        return self._matrix(local)

    def midpoint_load(self, values):
        """Load vector of a function given at the edge midpoints."""
        weights = (self.mesh.triangle_areas / 3.0)[:, None] * values
        local = weights @ MIDPOINT_BASIS
        return np.bincount(
            self.mesh.triangles.ravel(),
            weights=local.ravel(),
            minlength=self.mesh.node_count,
        )

    def conductivity_sensitivity(self, y):
        """
        Matrix of ``u -> (integral of u grad(y) . grad(phi_i))``.

        The coefficient is the element mean of ``u``.
        """
        local_y = np.asarray(y)[self.mesh.triangles]
        flux = np.einsum("tid,ti->td", self.gradients, local_y)
        coupling = np.einsum("tid,td->ti", self.gradients, flux)
        local = (self.mesh.triangle_areas / 3.0)[:, None, None] * np.repeat(
            coupling[:, :, None], 3, axis=2
        )
        return self._matrix(local)

    def boundary_mass(self, weights=None):
        """Boundary mass matrix in boundary-loop numbering, optionally edge weighted."""
        mesh = self.mesh
        count = mesh.boundary_node_count
        lengths = mesh.edge_lengths if weights is None else mesh.edge_lengths * weights
        first = mesh.boundary_position[mesh.boundary_edges[:, 0]]
        second = mesh.boundary_position[mesh.boundary_edges[:, 1]]
        rows = np.concatenate([first, first, second, second])
        columns = np.concatenate([first, second, first, second])
        values = np.concatenate([2 * lengths, lengths, lengths, 2 * lengths]) / 6.0
        return sparse.csr_matrix((values, (rows, columns)), shape=(count, count))

    def boundary_load(self, values):
        """Nodal load of a boundary flux given on the boundary nodes."""
        return self.restriction.T @ (self.boundary_mass() @ values)


class BasePhysics:

    """
    Base class of the PDE models.

    The weak form is
    ``(sigma(u) grad y, grad v) + (q(u) y, v) + (g(u, y), v) = <f, v>_Gamma``
    and the inclusion enters every coefficient linearly.
    """

    semilinear = False
    linear_background = True
    gauge = False

    def conductivity(self, problem, u):
        """Nodal conductivity ``sigma(u)``."""
        return np.full(len(u[0]), problem.c0)

    def potential(self, problem, u_mid):
        """Linear potential ``q(u)`` at the edge midpoints, or None."""
        return None

    def nonlinearity(self, problem, u_mid, y_mid):
        """Values and derivatives of ``g(u, y)`` at the midpoints, or None."""
        return None

    def background_potential(self, problem, y_mid):
        """Midpoint coefficient of the mass part of the frozen operator ``A[y]``."""
        return self.potential(problem, [np.zeros_like(y_mid)] * len(problem.types))

    def sensitivities(self, problem, assembler, y):
        """Matrices ``B_l(y)`` with ``B_l(y) @ u_l`` the load of the type-l term."""
        raise NotImplementedError("Subclasses implement this method")

    def flux(self, assembler, values):
        return values


class EITPhysics(BasePhysics):

    """``-div((1 + u_c) grad y) = 0`` with the zero-mean gauge."""

    gauge = True

    def conductivity(self, problem, u):
        return problem.c0 + u[0]

    def sensitivities(self, problem, assembler, y):
        return [assembler.conductivity_sensitivity(y)]

    def flux(self, assembler, values):
        # Pure Neumann data must integrate to zero
        weights = assembler.boundary_mass() @ np.ones(len(values))
        return values - np.dot(weights, values) / weights.sum()


class DOTPhysics(BasePhysics):

    """``-div((c0 + u_c) grad y) + (p0 + u_p) y = 0``."""

    def conductivity(self, problem, u):
        return problem.c0 + u[0]

    def potential(self, problem, u_mid):
        return problem.p0 + u_mid[1]

    def sensitivities(self, problem, assembler, y):
        y_mid = assembler.at_midpoints(y)
        return [assembler.conductivity_sensitivity(y), assembler.mass(y_mid)]


class CEPhysics(BasePhysics):

    """
    ``-div(sigma grad y) + (1 - u) y**3 = 0`` with ``sigma = 1 - (1 - 1e-4) u``.

    ``u`` is the characteristic function of the ischemic region.
    """

    semilinear = True
    linear_background = False

    drop = 1.0 - ISCHEMIC_CONDUCTIVITY

    def conductivity(self, problem, u):
        return problem.c0 - self.drop * u[0]

    def nonlinearity(self, problem, u_mid, y_mid):
        healthy = 1.0 - u_mid[0]
        return healthy * y_mid**3, 3.0 * healthy * y_mid**2

    def background_potential(self, problem, y_mid):
        return y_mid**2

    def sensitivities(self, problem, assembler, y):
        y_mid = assembler.at_midpoints(y)
        return [
            -self.drop * assembler.conductivity_sensitivity(y)
            - assembler.mass(y_mid**3)
        ]


class ModulusPhysics(BasePhysics):

    """``-lap(y) + y + u |y| y = 0``."""

    semilinear = True

    def potential(self, problem, u_mid):
        return np.ones_like(u_mid[0])

    def nonlinearity(self, problem, u_mid, y_mid):
        return u_mid[0] * np.abs(y_mid) * y_mid, 2.0 * u_mid[0] * np.abs(y_mid)

    def sensitivities(self, problem, assembler, y):
        y_mid = assembler.at_midpoints(y)
        return [assembler.mass(np.abs(y_mid) * y_mid)]


PHYSICS_BACKENDS = {
    EIT: EITPhysics,
    DOT: DOTPhysics,
    CE: CEPhysics,
    MODULUS: ModulusPhysics,
}


class EllipticSolver:

    """
    Assembles and solves one problem on one mesh.

    Keeps the factorized background operator of linear models and the
    zero-inclusion state of semilinear models per flux.
    """

    def __init__(self, problem, mesh):
        self.problem = problem
        self.mesh = mesh
        self.physics = problem.physics
        self.assembler = get_assembler(mesh)
        self._background = {}
        self._zero_states = {}

    def _coefficients(self, u):
        u = [np.asarray(values, dtype=float) for values in u]
        sigma = self.physics.conductivity(self.problem, u)
        if np.any(sigma <= 0.0):
            raise CoefficientError(
                f"Nonpositive conductivity {sigma.min()!r} in {self.problem.model}"
            )
        u_mid = [self.assembler.at_midpoints(values) for values in u]
        return sigma, u_mid

    def linear_part(self, u):
        """Stiffness plus linear mass part of the operator at inclusion ``u``."""
        sigma, u_mid = self._coefficients(u)
        matrix = self.assembler.stiffness(sigma)
        potential = self.physics.potential(self.problem, u_mid)
        if potential is not None:
            matrix = matrix + self.assembler.mass(potential)
        return matrix, u_mid

    def assemble(self, u, y_lin=None):
        """Operator linearized at ``y_lin`` and the flux-to-load functional."""
        matrix, u_mid = self.linear_part(u)
        if self.physics.semilinear:
            _, derivative = self.physics.nonlinearity(
                self.problem, u_mid, self.assembler.at_midpoints(y_lin)
            )
            matrix = matrix + self.assembler.mass(derivative)
        return matrix.tocsr(), self.load

    def load(self, f):
        values = self.physics.flux(self.assembler, np.asarray(f.values, dtype=float))
        return self.assembler.boundary_load(values)

    def background_matrix(self, y=None):
        """The operator ``A[y]``; ``y`` is ignored for linear backgrounds."""
        zero = [np.zeros(self.mesh.node_count)] * len(self.problem.types)
        sigma, _ = self._coefficients(zero)
        matrix = self.assembler.stiffness(sigma)
        if self.physics.linear_background:
            potential = self.physics.potential(
                self.problem, [np.zeros((self.mesh.triangle_count, 3))] * len(zero)
            )
        else:
            potential = self.physics.background_potential(
                self.problem, self.assembler.at_midpoints(y)
            )
        if potential is not None:
            matrix = matrix + self.assembler.mass(potential)
        return matrix.tocsr()

    def residual(self, u, y, load):
        matrix, u_mid = self.linear_part(u)
        residual = matrix @ y - load
        if self.physics.semilinear:
            value, _ = self.physics.nonlinearity(
                self.problem, u_mid, self.assembler.at_midpoints(y)
            )
            residual = residual + self.assembler.midpoint_load(value)
        return residual

    def solve_linear(self, matrix, rhs, rtol=None):
        """Direct solve, with the zero-mean constraint for gauge models."""
        if rtol is None:
            rtol = settings.IDSM_SOLVER_RTOL
        size = matrix.shape[0]
        if self.physics.gauge:
            mean = self.mesh.lumped_mass[:, None]
            matrix = sparse.bmat(
                [[matrix, sparse.csr_matrix(mean)], [sparse.csr_matrix(mean.T), None]]
            )
            rhs = np.append(rhs, 0.0)
        solution = factorize(matrix)(rhs)
        check_residual(matrix, solution, rhs, rtol)
        return solution[:size]

    def forward(self, u, f, counter=None):
        """
        The state ``y(u)`` for the flux ``f``.

        A Newton solve, warm start included, records one PDE solve on
        ``counter``.
        """
        load = self.load(f)
        if not self.physics.semilinear:
            matrix, _ = self.linear_part(u)
            state = self.solve_linear(matrix.tocsr(), load)
        else:
            state = self._newton(u, load, self._zero_state(f, load))
        if counter is not None:
            counter.record()
        return state

    def background(self, f, y=None, counter=None):
        """The background solution ``A[y]^-1 f``; cache hits are not solves."""
        if self.physics.linear_background:
            key = f.values.tobytes()
            if key in self._background:
                log.debug("Background cache hit for %s", f.name)
                return self._background[key]
            solution = self.solve_linear(self.background_matrix(), self.load(f))
            self._background[key] = solution
        else:
            solution = self.solve_linear(self.background_matrix(y), self.load(f))
        if counter is not None:
            counter.record()
        return solution

    def _zero_state(self, f, load):
        key = f.values.tobytes()
        if key not in self._zero_states:
            zero = [np.zeros(self.mesh.node_count)] * len(self.problem.types)
            sigma, _ = self._coefficients(zero)
            guess_matrix = self.assembler.stiffness(sigma) + self.assembler.mass()
            guess = self.solve_linear(guess_matrix.tocsr(), load)
            self._zero_states[key] = self._newton(zero, load, guess)
        return self._zero_states[key]

    def _newton(
        self, u, load, initial, rtol=None, max_iterations=None, max_halvings=None
    ):
        """Newton iteration with step halving on residual increase."""
        if rtol is None:
            rtol = settings.IDSM_SOLVER_RTOL
        if max_iterations is None:
            max_iterations = settings.IDSM_NEWTON_MAX_ITERATIONS
        if max_halvings is None:
            max_halvings = settings.IDSM_NEWTON_MAX_HALVINGS

        y = np.array(initial, dtype=float)
        residual = self.residual(u, y, load)
        residual_norm = np.linalg.norm(residual)
        if residual_norm == 0.0:
            return y
        # Residuals below the linear solve tolerance may grow by roundoff
        floor = rtol * max(np.linalg.norm(load), 1.0)

        for iteration in range(1, max_iterations + 1):
            jacobian, _ = self.assemble(u, y)
            increment = self.solve_linear(jacobian, -residual)
            step = 1.0
            for _ in range(max_halvings + 1):
                trial = y + step * increment
                trial_residual = self.residual(u, trial, load)
                trial_norm = np.linalg.norm(trial_residual)
                if trial_norm <= max(residual_norm, floor):
                    break
                step *= 0.5
            else:
                raise SolverError(
                    f"Newton step {iteration} increased the residual after "
                    f"{max_halvings} halvings",
                    residual=residual_norm,
                )
            y, residual, residual_norm = trial, trial_residual, trial_norm
            change = step * np.linalg.norm(increment)
            log.debug(
                "Newton step %s: residual=%.3e increment=%.3e step=%s",
                iteration,
                residual_norm,
                change,
                step,
            )
            if change <= rtol * max(np.linalg.norm(y), np.finfo(float).tiny):
                return y

        raise SolverError(
            f"Newton did not converge in {max_iterations} iterations",
            residual=residual_norm,
        )

    def sensitivities(self, y):
        return self.physics.sensitivities(self.problem, self.assembler, np.asarray(y))


_assemblers = weakref.WeakKeyDictionary()
_solvers = weakref.WeakKeyDictionary()


def get_assembler(mesh):
    """The shared :py:class:`Assembler` of a mesh."""
    if mesh not in _assemblers:
        _assemblers[mesh] = Assembler(mesh)
    return _assemblers[mesh]


def get_solver(problem, mesh):
    """The shared :py:class:`EllipticSolver` of a problem on a mesh."""
    per_mesh = _solvers.setdefault(mesh, {})
    if problem not in per_mesh:
        per_mesh[problem] = EllipticSolver(problem, mesh)
    return per_mesh[problem]


def factorize(matrix):
    """Sparse LU factorization, returning a solve function."""
    try:
        return sparse_linalg.splu(sparse.csc_matrix(matrix)).solve
    except RuntimeError as error:
        raise SolverError(f"Singular system: {error}")


def check_residual(matrix, solution, rhs, rtol):
    scale = np.linalg.norm(rhs)
    residual = np.linalg.norm(matrix @ solution - rhs)
    if not np.all(np.isfinite(solution)) or residual > rtol * max(scale, 1.0):
        raise SolverError(
            f"Linear solve residual {residual!r} exceeds tolerance", residual=residual
        )


def lp_norm(mesh, values, p):
    """
    ``L^p`` norm of nodal values with the vertex quadrature rule.

    ``values`` may stack several fields (one per inclusion type); the norm is
    then taken over the stacked domain.
    """
    magnitude = np.abs(np.atleast_2d(np.asarray(values, dtype=float)))
    scale = float(magnitude.max()) if magnitude.size else 0.0
    if scale == 0.0:
        return 0.0
    if np.isinf(p):
        return scale
    weighted = mesh.lumped_mass[None, :] * (magnitude / scale) ** p
    return scale * float(weighted.sum()) ** (1.0 / p)


def validate_inclusions(problem, u):
    """Check one field per inclusion type, each inside its box."""
    if len(u) != len(problem.types):
        raise ValidationError(
            "Expected %(expected)s inclusion fields, got %(count)s",
            params={"expected": len(problem.types), "count": len(u)},
            code="inclusion-count",
        )
    for field, inclusion in zip(u, problem.types):
        values = field.values if isinstance(field, FeField) else np.asarray(field)
        if np.any(values < inclusion.lower) or np.any(values > inclusion.upper):
            raise ValidationError(
                "%(name)s leaves its box [%(lower)s, %(upper)s]",
                params={
                    "name": inclusion.name,
                    "lower": inclusion.lower,
                    "upper": inclusion.upper,
                },
                code="box",
            )
    return [
        field.values if isinstance(field, FeField) else np.asarray(field)
        for field in u
    ]


def assemble(problem, u, y_lin=None):
    """
    Assemble the operator of ``problem`` at inclusion ``u``.

    :param u: one :py:class:`FeField` per inclusion type
    :param y_lin: linearization state, required for semilinear models only
    :return: the sparse matrix and a function mapping a flux to its load vector
    """
    values = validate_inclusions(problem, u)
    if problem.semilinear != (y_lin is not None):
        raise ValidationError(
            "A linearization state is required exactly for semilinear models",
            code="linearization",
        )
    mesh = u[0].mesh
    state = None if y_lin is None else y_lin.values
    return get_solver(problem, mesh).assemble(values, state)


def solve_forward(problem, u, f, counter=None):
    """The state ``y(u)`` driven by the boundary flux ``f``."""
    values = validate_inclusions(problem, u)
    solver = get_solver(problem, f.mesh)
    return FeField(f.mesh, solver.forward(values, f, counter=counter), name="y")


def solve_background(problem, u_k, f, y=None, counter=None):
    """
    The background solution ``A[y(u_k)]^-1 f``.

    For linear backgrounds the result does not depend on ``u_k`` and is cached.
    ``y`` may pass a known ``y(u_k)`` to avoid solving for it again.
    """
    values = validate_inclusions(problem, u_k)
    solver = get_solver(problem, f.mesh)
    if problem.linear_background:
        background = solver.background(f, counter=counter)
    else:
        state = y.values if y is not None else solver.forward(values, f, counter)
        background = solver.background(f, state, counter=counter)
    return FeField(f.mesh, background, name="y_background")


def trace(y, part=FULL, partition=None):
    """Boundary values of ``y``, zeroed outside the requested part."""
    values = np.asarray(y.values)[y.mesh.boundary_nodes]
    if part == DIRICHLET:
        values = np.where(partition.dirichlet_nodes, values, 0.0)
    elif part == NEUMANN:
        values = np.where(partition.neumann_nodes, values, 0.0)
    elif part != FULL:
        raise ValidationError(
            "Unknown boundary part %(part)s", params={"part": part}, code="part"
        )
    return BoundaryField(y.mesh, values, name=f"trace_{part}")
