"""
The resolver: a diagonal singular part plus damped low-rank corrections.

Dual functions are handled as P1 load vectors and index functions as nodal
values, one row per inclusion type. Every operator here treats the types
jointly, with the singular part acting on each type separately.
"""
import logging
from dataclasses import dataclass
from dataclasses import field

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.spatial.distance import cdist

from .constants import BFG
from .constants import DFP
from .constants import DISK_AREA
from .constants import SCHEMES
from .dtn import DualFunction
from .exceptions import PreconditionError
from .fem import FeField
from .fem import lp_norm
from .mesh import distance_to_boundary


log = logging.getLogger(__name__)  # noqa

# Two-point Gauss rule on [0, 1]
GAUSS_POINTS = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))

# Interior nodes handled per block when evaluating the diagonal kernel
KERNEL_BLOCK = 2048


class DiagonalD:

    """
    The diagonal part ``D(x) = C_D * kernel(x)`` of one inclusion type.

    The kernel vanishes in the boundary band ``1 - |x| < eps_band``.
    """

    def __init__(self, mesh, kernel, gamma, eps_band, scale=1.0):
        self.mesh = mesh
        self.kernel = np.asarray(kernel, dtype=float)
        self.gamma = gamma
        self.eps_band = eps_band
        self.scale = float(scale)

    def __repr__(self):
        return f"<DiagonalD gamma={self.gamma} C_D={self.scale:.6e}>"

    @property
    def values(self):
        return self.scale * self.kernel

    @property
    def field(self):
        return FeField(self.mesh, self.values, name="D")


@dataclass
class LowRankTerm:

    """The dyad ``coefficient * left (x) right`` with its accumulated damping."""

    left: np.ndarray
    right: np.ndarray
    coefficient: float
    damping: float = 1.0

    def apply(self, loads):
        pairing = float(np.sum(self.right * loads))
        return self.coefficient * self.damping * pairing * self.left


@dataclass
class ResolverState:

    """Diagonal parts, coarse map and low-rank terms of the current resolver."""

    diagonals: list
    coarse_map: object
    scheme: str = BFG
    p_index: float = 2.0
    damping: bool = True
    terms: list = field(default_factory=list)
    pending: int = 0
    lambda_prev: float = 0.0
    c_lambda: float = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(
                "Unknown scheme %(scheme)s",
                params={"scheme": self.scheme},
                code="scheme",
            )
        if not self.p_index >= 1.0:
            raise ValidationError("The integrability index must be >= 1", code="p")

    @property
    def mesh(self):
        return self.coarse_map.fine_mesh

    @property
    def type_count(self):
        return len(self.diagonals)

    @property
    def domain_measure(self):
        """Measure of the type-stacked domain."""
        return self.type_count * DISK_AREA

    @property
    def scales(self):
        return [diagonal.scale for diagonal in self.diagonals]


def build_diag(mesh, partition, params, gamma, eps_band=None):
    """
    Evaluate the diagonal kernel at every node.

    The boundary norm of ``Phi_x * a / (1 + a) + |grad Phi_x| / (1 + a)``, with
    ``Phi_x`` the fundamental solution centered at the node and ``a`` the
    edge-wise regularization weight, is integrated with two Gauss points per
    boundary edge and raised to ``-gamma``.
    """
    if eps_band is None:
        eps_band = settings.IDSM_BAND_WIDTH
    if not 0.0 < eps_band < 1.0:
        raise ValidationError("The boundary band must lie in (0, 1)", code="band")

    first = mesh.nodes[mesh.boundary_edges[:, 0]]
    second = mesh.nodes[mesh.boundary_edges[:, 1]]
    points = np.vstack([first + s * (second - first) for s in GAUSS_POINTS])
    weights = np.tile(mesh.edge_lengths / 2.0, len(GAUSS_POINTS))
    alpha = np.tile(
        partition.edge_weights(params.alpha_d, params.alpha_n), len(GAUSS_POINTS)
    )

    kernel = np.zeros(mesh.node_count)
    interior = np.flatnonzero(distance_to_boundary(mesh.nodes) >= eps_band)
    for start in range(0, len(interior), KERNEL_BLOCK):
        block = interior[start : start + KERNEL_BLOCK]
        distance = cdist(mesh.nodes[block], points)
        phi = -np.log(distance) / (2.0 * np.pi)
        gradient = 1.0 / (2.0 * np.pi * distance)
        integrand = (phi * alpha + gradient) / (1.0 + alpha)
        kernel[block] = np.sqrt(integrand**2 @ weights) ** (-gamma)

    log.debug(
        "Diagonal kernel: %s interior nodes, max=%.3e", len(interior), kernel.max()
    )
    return DiagonalD(mesh, kernel, gamma, eps_band)


def build_resolver(problem, partition, coarse_map, params, p_index, scheme, **kwargs):
    """A fresh resolver with one diagonal part per inclusion type."""
    eps_band = kwargs.pop("eps_band", None)
    diagonals = [
        build_diag(partition.mesh, partition, params, inclusion.gamma, eps_band)
        for inclusion in problem.types
    ]
    return ResolverState(
        diagonals=diagonals,
        coarse_map=coarse_map,
        scheme=scheme,
        p_index=p_index,
        **kwargs,
    )


def _as_loads(zeta):
    if isinstance(zeta, DualFunction):
        return zeta.stacked
    return np.atleast_2d(np.asarray(zeta, dtype=float))


def _as_nodal(values):
    if isinstance(values, FeField):
        return np.atleast_2d(values.values)
    if isinstance(values, (list, tuple)) and values and isinstance(values[0], FeField):
        return np.vstack([item.values for item in values])
    return np.atleast_2d(np.asarray(values, dtype=float))


def _fields(state, rows, name):
    return [
        FeField(state.mesh, row, name=f"{name}_{index}")
        for index, row in enumerate(rows)
    ]


def _average(coarse_map, loads):
    """Cell averages of load rows, lifted back to the fine nodes."""
    transfer = coarse_map.transfer
    cells = (transfer.T @ loads.T) / coarse_map.coarse_areas[:, None]
    return (transfer @ cells).T


def singular_part(state, loads):
    """``R0`` applied to stacked load vectors."""
    roots = np.vstack([np.sqrt(diagonal.values) for diagonal in state.diagonals])
    return roots * _average(state.coarse_map, roots * loads)


def stabilizer(state, loads):
    """``S`` applied to stacked load vectors."""
    return _average(state.coarse_map, loads)


def project_factor(state, nodal):
    """``S`` applied to a nodal field, read as a density."""
    return stabilizer(state, nodal * state.mesh.lumped_mass[None, :])


def apply_R0(state, zeta):
    return _fields(state, singular_part(state, _as_loads(zeta)), "R0")


def apply_S(state, field_or_dual):
    """Coarse-cell averaging of a dual function or a nodal field."""
    if isinstance(field_or_dual, DualFunction):
        rows = stabilizer(state, field_or_dual.stacked)
    else:
        rows = project_factor(state, _as_nodal(field_or_dual))
    return _fields(state, rows, "S")


def resolve(state, loads):
    """The resolver applied to stacked load vectors, as stacked nodal values."""
    result = singular_part(state, loads)
    for term in state.terms:
        result = result + term.apply(loads)
    return result


def apply_resolver(state, zeta):
    return _fields(state, resolve(state, _as_loads(zeta)), "eta")


def _pairings(loads, eta, r_zeta):
    return float(np.sum(loads * eta)), float(np.sum(loads * r_zeta))


def _check_pairings(s, t):
    if not (s > 0.0 and t > 0.0):
        raise PreconditionError(
            f"Nonpositive dual pairings <zeta, eta>={s!r} <zeta, R zeta>={t!r}"
        )


def damping_measure(state, eta_hat, loads, r_zeta):
    """The damping parameter before multiplication by ``C_lambda``."""
    s, t = _pairings(loads, eta_hat, r_zeta)
    _check_pairings(s, t)
    mesh = state.mesh
    p = state.p_index
    measure = state.domain_measure ** (2.0 * (1.0 - 1.0 / p))
    if state.scheme == DFP:
        first = eta_hat / np.sqrt(s)
        second = r_zeta / np.sqrt(t)
        return (
            measure
            * lp_norm(mesh, first + second, p)
            * lp_norm(mesh, first - second, p)
        )
    mismatch = eta_hat - r_zeta
    corrected = 2.0 * mismatch - eta_hat * float(np.sum(loads * mismatch)) / s
    return measure * lp_norm(mesh, eta_hat, p) / s * lp_norm(mesh, corrected, p)


def compute_damping(state, eta_hat, zeta_hat, R_zeta):
    """
    The damping parameter of the latest correction.

    The first call calibrates ``C_lambda`` so that it returns one.
    """
    raw = damping_measure(
        state, _as_nodal(eta_hat), _as_loads(zeta_hat), _as_nodal(R_zeta)
    )
    if state.c_lambda is None:
        if raw > 0.0:
            state.c_lambda = 1.0 / raw
            log.info("Calibrated C_lambda=%.6e", state.c_lambda)
            value = 1.0
        else:
            value = 0.0
    else:
        value = state.c_lambda * raw
    if not state.damping:
        value = 0.0
    return value


def stabilize(state):
    """Project the latest correction onto the coarse mesh and damp every term."""
    for term in state.terms[len(state.terms) - state.pending :]:
        term.left = project_factor(state, term.left)
        term.right = project_factor(state, term.right)
    state.pending = 0

    factor = 1.0 / (1.0 + state.lambda_prev) if state.damping else 1.0
    for term in state.terms:
        term.damping *= factor
    log.debug("Stabilized %s terms with factor %.6f", len(state.terms), factor)
    return state


def auxiliary_index(u_next, R_zeta, zeta_hat, box):
    """
    Build the auxiliary index function of the correction.

    Splices ``R zeta`` onto ``u_next`` where ``u_next`` sits on a bound, then
    blends with ``u_next`` so that the pairing with ``zeta_hat`` is positive
    whenever ``<zeta_hat, u_next>`` is. The blend weight stays in ``[0, 1]``,
    so the result projects back onto ``u_next`` exactly.

    :param box: one ``(lower, upper)`` pair per inclusion type
    """
    u = _as_nodal(u_next)
    r_zeta = _as_nodal(R_zeta)
    if isinstance(zeta_hat, DualFunction):
        loads = zeta_hat.stacked
    else:
        loads = _as_nodal(zeta_hat)
    boxes = [box] if np.ndim(box) == 1 else list(box)

    spliced = u.copy()
    for row, (lower, upper) in enumerate(boxes):
        at_upper = u[row] == upper
        at_lower = u[row] == lower
        spliced[row, at_upper] = np.maximum(upper, r_zeta[row, at_upper])
        spliced[row, at_lower] = np.minimum(lower, r_zeta[row, at_lower])

    on_u = float(np.sum(loads * u))
    on_resolver = float(np.sum(loads * r_zeta))
    on_spliced = float(np.sum(loads * spliced))
    upsilon = 1.0
    if on_u > on_resolver > on_spliced:
        upsilon = min(max(on_u / (2.0 * (on_u - on_resolver)), 0.0), 1.0)
    # A positive pairing with u_next is kept by stopping halfway to the sign change
    if on_u > 0.0 and on_u + upsilon * (on_spliced - on_u) <= 0.0:
        upsilon = on_u / (2.0 * (on_u - on_spliced))
    log.debug("Auxiliary index blend upsilon=%.6f", upsilon)

    blended = u + upsilon * (spliced - u)
    mesh = u_next[0].mesh if isinstance(u_next, (list, tuple)) else u_next.mesh
    return [
        FeField(mesh, row, name=f"eta_hat_{index}")
        for index, row in enumerate(blended)
    ]


def lowrank_update(state, eta_hat, zeta_hat, R_zeta=None):
    """Append the correction that makes the resolver map ``zeta_hat`` to ``eta_hat``."""
    eta = _as_nodal(eta_hat)
    loads = _as_loads(zeta_hat)
    r_zeta = resolve(state, loads) if R_zeta is None else _as_nodal(R_zeta)
    s, t = _pairings(loads, eta, r_zeta)
    _check_pairings(s, t)

    if state.scheme == DFP:
        new_terms = [
            LowRankTerm(eta.copy(), eta.copy(), 1.0 / s),
            LowRankTerm(r_zeta.copy(), r_zeta.copy(), -1.0 / t),
        ]
    else:
        mismatch = eta - r_zeta
        new_terms = [
            LowRankTerm(mismatch.copy(), eta.copy(), 1.0 / s),
            LowRankTerm(eta.copy(), mismatch.copy(), 1.0 / s),
            LowRankTerm(
                eta.copy(), eta.copy(), -float(np.sum(loads * mismatch)) / s**2
            ),
        ]
    state.terms.extend(new_terms)
    state.pending = len(new_terms)
    return state


def secant_residual(state, eta_hat, zeta_hat):
    """Relative maximum deviation of ``R zeta_hat`` from ``eta_hat``."""
    eta = _as_nodal(eta_hat)
    scale = np.abs(eta).max()
    deviation = np.abs(resolve(state, _as_loads(zeta_hat)) - eta).max()
    return float(deviation / scale) if scale > 0 else float(deviation)


def update_scaling(state, eta_hat, zeta_hat):
    """Rescale each diagonal part so ``||D zeta_hat||_1`` matches ``||eta_hat||_1``."""
    eta = _as_nodal(eta_hat)
    loads = _as_loads(zeta_hat)
    for row, diagonal in enumerate(state.diagonals):
        numerator = lp_norm(state.mesh, eta[row], 1.0)
        denominator = float(np.sum(diagonal.kernel * np.abs(loads[row])))
        if denominator > 0.0:
            diagonal.scale = numerator / denominator
        else:
            log.warning(
                "Zero scaling denominator for type %s, keeping C_D=%.6e",
                row,
                diagonal.scale,
            )
    return state


def normalize_scaling(state, zeta, boxes):
    """Scale every diagonal part so that the plain index reaches the box extent."""
    values = singular_part(state, _as_loads(zeta))
    for row, diagonal in enumerate(state.diagonals):
        peak = np.abs(values[row]).max()
        if peak > 0.0:
            lower, upper = boxes[row]
            diagonal.scale *= max(abs(lower), abs(upper)) / peak
    return state


def probe_bound(state, probes):
    """
    Both sides of the spectral bound of the stabilized resolver.

    :param probes: an array of stacked load vectors, one per probe
    :return: arrays of left and right sides
    """
    coarse = state.coarse_map
    diagonal_max = max(float(diagonal.values.max()) for diagonal in state.diagonals)
    constant = diagonal_max / coarse.h_min
    if state.c_lambda is not None:
        constant += 1.0 / (state.c_lambda * coarse.h_min**2)
    left = np.array([float(np.sum(probe * resolve(state, probe))) for probe in probes])
    right = np.array([constant * float(np.abs(probe).sum()) ** 2 for probe in probes])
    return left, right
