"""Heterogeneous regularized Dirichlet-to-Neumann map and the adjoint lift."""
import logging
from collections import namedtuple

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy import sparse

from .fem import BoundaryField
from .fem import check_residual
from .fem import factorize
from .fem import FeField
from .fem import get_assembler
from .fem import get_solver
from .fem import validate_inclusions


log = logging.getLogger(__name__)  # noqa


class HrDtnParams(namedtuple("HrDtnParams", ["alpha_d", "alpha_n"])):

    """Regularization weights on the accessible (D) and inaccessible (N) boundary."""

    __slots__ = ()

    def __new__(cls, alpha_d, alpha_n):
        alpha_d, alpha_n = float(alpha_d), float(alpha_n)
        if not (alpha_d > 0 and alpha_n > 0):
            raise ValidationError(
                "Regularization weights must be positive", code="alpha"
            )
        return super().__new__(cls, alpha_d, alpha_n)

    @classmethod
    def uniform(cls, alpha):
        """The homogeneous map with one weight on the whole boundary."""
        return cls(alpha, alpha)

    @property
    def homogeneous(self):
        return self.alpha_d == self.alpha_n


class DualFunction:

    """
    A dual function per inclusion type, stored as P1 load vectors.

    Entry ``i`` of a load vector is the integral of the dual density against
    the basis function of node ``i``, so pairing with a nodal field is a dot
    product.
    """

    def __init__(self, mesh, loads, names):
        loads = [np.array(load, dtype=float).ravel() for load in loads]
        if len(loads) != len(names):
            raise ValidationError("One load vector per inclusion type", code="types")
        for load in loads:
            if len(load) != mesh.node_count:
                raise ValidationError("Dual load has the wrong length", code="length")
            if not np.all(np.isfinite(load)):
                raise ValidationError("Dual function is not finite", code="finite")
        self.mesh = mesh
        self.loads = loads
        self.names = tuple(names)

    def __repr__(self):
        return f"<DualFunction types={self.names!r}>"

    def __add__(self, other):
        if self.names != other.names or self.mesh is not other.mesh:
            raise ValidationError("Dual functions do not match", code="types")
        return DualFunction(
            self.mesh, [a + b for a, b in zip(self.loads, other.loads)], self.names
        )

    def __mul__(self, factor):
        loads = [factor * load for load in self.loads]
        return DualFunction(self.mesh, loads, self.names)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, mesh, names):
        return cls(mesh, [np.zeros(mesh.node_count) for _ in names], names)

    @property
    def stacked(self):
        return np.vstack(self.loads)

    @property
    def fields(self):
        return [
            FeField(self.mesh, load, name=f"zeta_{name}")
            for load, name in zip(self.loads, self.names)
        ]

    def density(self):
        """Nodal densities, the load divided by the lumped mass."""
        return self.stacked / self.mesh.lumped_mass[None, :]

    def pairing(self, fields):
        """The dual pairing with one nodal field (or array) per type."""
        values = np.vstack(
            [field.values if isinstance(field, FeField) else field for field in fields]
        )
        return float(np.sum(self.stacked * values))

    def l1_norm(self):
        return float(np.abs(self.stacked).sum())

    def is_zero(self):
        return not np.any(self.stacked)


class HrDtnOperator:

    """
    One factorized saddle system of the HR-DtN map.

    The block system is::

        [ A        -T' M ] [w]   [ 0   ]
        [ M T      M_a   ] [p] = [ M v ]

    with ``M`` the boundary mass matrix and ``M_a`` its edge-wise weighting by
    the regularization parameters. Gauge models append the zero-mean row.
    """

    def __init__(self, matrix, params, partition, gauge=False):
        mesh = partition.mesh
        assembler = get_assembler(mesh)
        self.mesh = mesh
        self.params = params
        self.partition = partition
        self.gauge = gauge

        self.boundary_mass = assembler.boundary_mass()
        weighted = assembler.boundary_mass(
            partition.edge_weights(params.alpha_d, params.alpha_n)
        )
        coupling = self.boundary_mass @ assembler.restriction
        blocks = [[matrix, -coupling.T], [coupling, weighted]]
        if gauge:
            mean = sparse.csr_matrix(mesh.lumped_mass[:, None])
            blocks[0].append(mean)
            blocks[1].append(None)
            blocks.append([mean.T, None, None])
        self.system = sparse.bmat(blocks).tocsr()
        self._solve = factorize(self.system)
        log.debug(
            "Factorized HR-DtN system of size %s (gauge=%s)",
            self.system.shape[0],
            gauge,
        )

    def solve(self, v, rtol=None, counter=None):
        """The pair ``(w, p)`` for boundary data ``v``, one solve on ``counter``."""
        if rtol is None:
            rtol = settings.IDSM_SOLVER_RTOL
        nodes = self.mesh.node_count
        boundary = self.mesh.boundary_node_count
        rhs = np.zeros(self.system.shape[0])
        rhs[nodes : nodes + boundary] = self.boundary_mass @ v.values
        solution = self._solve(rhs)
        check_residual(self.system, solution, rhs, rtol)
        if counter is not None:
            counter.record()
        return (
            FeField(self.mesh, solution[:nodes], name="w"),
            BoundaryField(self.mesh, solution[nodes : nodes + boundary], name="p"),
        )


def solve_hrdtn(A_matrix, params, partition, v, gauge=False):
    """
    Apply the HR-DtN map to ``v``.

    :param A_matrix: the assembled background operator
    :param gauge: append the zero-mean constraint (pure Neumann operators)
    :return: the interior field ``w`` and the boundary output ``p``
    """
    return HrDtnOperator(A_matrix, params, partition, gauge=gauge).solve(v)


def background_operator(problem, y_k, params, partition):
    """The saddle system built on ``A[y_k]`` of a problem."""
    solver = get_solver(problem, partition.mesh)
    matrix = solver.background_matrix(None if y_k is None else y_k.values)
    return HrDtnOperator(matrix, params, partition, gauge=solver.physics.gauge)


def adjoint_lift(
    problem, u_k, y_k, params, partition, v, operator=None, counter=None
):
    """
    Lift boundary data ``v`` to a dual function with two HR-DtN solves.

    The first solve maps ``v`` to ``p1``. The interior part of the second
    solve with data ``p1`` is ``-w2`` by the sign of the coupling block; it is
    tested against the sensitivity of every inclusion type at the state
    ``y_k``.

    :param operator: a prebuilt :py:class:`HrDtnOperator` on ``A[y_k]``
    :param counter: records both solves
    """
    validate_inclusions(problem, u_k)
    if operator is None:
        operator = background_operator(problem, y_k, params, partition)
    mesh = partition.mesh
    _, p1 = operator.solve(v, counter=counter)
    negated_w2, _ = operator.solve(p1, counter=counter)
    sensitivities = get_solver(problem, mesh).sensitivities(y_k.values)
    loads = [matrix.T @ negated_w2.values for matrix in sensitivities]
    return DualFunction(mesh, loads, problem.type_names)


def aggregate_duals(per_dataset):
    """Sum the dual functions of all datasets, type by type."""
    if not per_dataset:
        raise ValidationError("No dual functions to aggregate", code="empty")
    first = per_dataset[0]
    for dual in per_dataset[1:]:
        if dual.names != first.names or dual.mesh is not first.mesh:
            raise ValidationError(
                "Dual functions have mismatched type lists", code="types"
            )
    loads = [np.array(load) for load in first.loads]
    for dual in per_dataset[1:]:
        for total, load in zip(loads, dual.loads):
            total += load
    return DualFunction(first.mesh, loads, first.names)
