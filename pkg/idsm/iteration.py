"""The iterative direct sampling loop and its bookkeeping."""
import logging
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from dataclasses import field

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from .constants import BFG
from .constants import SCALING_NORMALIZE
from .constants import SCALINGS
from .constants import STAGE_ADJOINT
from .constants import STAGE_AUXILIARY_ADJOINT
from .constants import STAGE_BACKGROUND
from .constants import STAGE_FORWARD
from .constants import STAGE_INITIALIZATION
from .dtn import adjoint_lift
from .dtn import aggregate_duals
from .dtn import background_operator
from .exceptions import IdsmError
from .fem import BoundaryField
from .fem import FeField
from .fem import get_assembler
from .fem import solve_background
from .fem import solve_forward
from .fem import trace
from .mesh import build_coarse_map
from .mesh import build_disk_mesh
from .mesh import partition_boundary
from .models import evaluate_flux
from .resolver import auxiliary_index
from .resolver import build_resolver
from .resolver import compute_damping
from .resolver import lowrank_update
from .resolver import normalize_scaling
from .resolver import probe_bound
from .resolver import resolve
from .resolver import secant_residual
from .resolver import stabilize
from .resolver import update_scaling


log = logging.getLogger(__name__)  # noqa

# Boundary residuals below this fraction of the background trace are solver noise
DATA_FLOOR = 1e-9


@dataclass(frozen=True)
class RunConfig:

    """Everything a reconstruction (and its synthetic data) depends on."""

    problem: object
    fine_target: int
    coarse_target: int
    arcs: tuple
    fluxes: tuple
    params: object
    p_index: float = 2.0
    scheme: str = BFG
    max_iterations: int = 30
    noise: float = 0.15
    seed: int = 0
    shapes: tuple = ()
    full_data: bool = False
    damping: bool = True
    initial_scaling: str = SCALING_NORMALIZE
    eps_band: float = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError(
                "At least one iteration is required", code="iterations"
            )
        if self.noise < 0:
            raise ValidationError("The noise level must be nonnegative", code="noise")
        if not self.fluxes:
            raise ValidationError("At least one flux is required", code="fluxes")
        if self.initial_scaling not in SCALINGS:
            raise ValidationError(
                "Unknown initial scaling %(scaling)s",
                params={"scaling": self.initial_scaling},
                code="scaling",
            )

    @property
    def boxes(self):
        return self.problem.boxes


@dataclass
class IterationRecord:

    """The outcome of one pass of the loop; ``k = 0`` is the initial guess."""

    k: int
    u: list
    eta: list
    lam: float
    solve_count: int
    residuals: list
    skipped: bool = False
    pairing: float = None
    rank: int = 0
    scales: list = field(default_factory=list)
    probe_ratio: float = None
    secant: float = None

    @property
    def damping_factor(self):
        return None if self.lam is None else 1.0 / (1.0 + self.lam)


class SolveCounter:

    """
    PDE solves by stage, recorded where a solve happens.

    The datasets of one stage share their operator and are solved as one
    batch of right-hand sides, so a stage adds the largest per-dataset tally
    once. Call :py:meth:`dataset` before the solves of each dataset.
    """

    def __init__(self):
        self.stages = Counter()
        self._tallies = None

    def __repr__(self):
        return f"<SolveCounter total={self.total}>"

    @contextmanager
    def stage(self, name):
        if self._tallies is not None:
            raise IdsmError(f"Stage {name} opened inside another stage")
        self._tallies = []
        try:
            yield self
        finally:
            tallies, self._tallies = self._tallies, None
            self.stages[name] += max(tallies, default=0)

    def dataset(self):
        if self._tallies is None:
            raise IdsmError("Datasets are counted inside a stage")
        self._tallies.append(0)

    def record(self, solves=1):
        if self._tallies is None:
            raise IdsmError("Solves are recorded inside a stage")
        if not self._tallies:
            self._tallies.append(0)
        self._tallies[-1] += solves

    @property
    def total(self):
        return sum(self.stages.values())


def expected_solves(iterations, linear_background):
    """Solve count of a complete run of ``iterations`` steps."""
    if linear_background:
        return 5 * iterations - 1
    return 6 * iterations - 2


def complete_data(y_d, y_k, partition):
    """Measured values on the accessible part, the current trace elsewhere."""
    values = np.where(partition.dirichlet_nodes, y_d.values, trace(y_k).values)
    return BoundaryField(y_d.mesh, values, name="y_completed")


def project(eta, box, name=None):
    """Clamp an index function into its box."""
    lower, upper = box
    return FeField(eta.mesh, np.clip(eta.values, lower, upper), name=name or eta.name)


class Reconstruction:

    """
    One run of the iterative direct sampling method.

    ``history`` keeps every record produced so far, also when a step fails.
    """

    def __init__(
        self, config, data, mesh=None, coarse_mesh=None, partition=None, **kwargs
    ):
        """
        :param data: one measured :py:class:`BoundaryField` per flux
        :param mesh: the reconstruction mesh (built from the config when missing)
        :param probe_count: random probes of the resolver bound per iteration
        :param probe_seed: seed of the probe generator
        """
        self.config = config
        self.problem = config.problem
        self.mesh = mesh or build_disk_mesh(config.fine_target)
        coarse_mesh = coarse_mesh or build_disk_mesh(config.coarse_target)
        self.partition = partition or partition_boundary(self.mesh, config.arcs)
        self.coarse_map = build_coarse_map(self.mesh, coarse_mesh)
        self.fluxes = [
            evaluate_flux(expression, self.mesh, name=f"f{index}")
            for index, expression in enumerate(config.fluxes, start=1)
        ]
        if len(data) != len(self.fluxes):
            raise ValidationError(
                "Expected %(expected)s datasets, got %(count)s",
                params={"expected": len(self.fluxes), "count": len(data)},
                code="datasets",
            )
        self.data = data
        self.state = build_resolver(
            self.problem,
            self.partition,
            self.coarse_map,
            config.params,
            config.p_index,
            config.scheme,
            damping=config.damping,
            eps_band=config.eps_band,
        )
        self.counter = SolveCounter()
        self.history = []
        self.probe_log = []
        self.probe_count = kwargs.get("probe_count")
        self.probe_seed = kwargs.get("probe_seed")
        self._operator = None
        self._boundary_mass = get_assembler(self.mesh).boundary_mass()

    def __repr__(self):
        return (
            f"<Reconstruction {self.problem.model} k={len(self.history) - 1} "
            f"solves={self.counter.total}>"
        )

    @property
    def iterations_done(self):
        return max(len(self.history) - 1, 0)

    def _operator_at(self, y):
        if self.problem.linear_background:
            if self._operator is None:
                self._operator = background_operator(
                    self.problem, None, self.config.params, self.partition
                )
            return self._operator
        return background_operator(self.problem, y, self.config.params, self.partition)

    def _boundary_norm(self, values):
        return float(np.sqrt(max(values @ (self._boundary_mass @ values), 0.0)))

    def _significant(self, residual, reference):
        """Zero out residuals at the level of the solver accuracy."""
        scale = max(np.abs(reference).max(), 1.0)
        if np.abs(residual).max() <= DATA_FLOOR * scale:
            return np.zeros_like(residual)
        return residual

    def _lift(self, u, states, residuals):
        duals = []
        for y, residual in zip(states, residuals):
            self.counter.dataset()
            v = BoundaryField(self.mesh, residual, name="v")
            duals.append(
                adjoint_lift(
                    self.problem,
                    u,
                    y,
                    self.config.params,
                    self.partition,
                    v,
                    operator=self._operator_at(y),
                    counter=self.counter,
                )
            )
        return aggregate_duals(duals)

    def initialize(self):
        """Solve for the zero initial guess and record ``k = 0``."""
        zero = [
            FeField.zeros(self.mesh, name=f"u_{name}")
            for name in self.problem.type_names
        ]
        self.u = zero
        with self.counter.stage(STAGE_INITIALIZATION):
            self.states = []
            for f in self.fluxes:
                self.counter.dataset()
                self.states.append(
                    solve_forward(self.problem, zero, f, counter=self.counter)
                )
        # At the zero guess the frozen operator A[y(0)] reproduces y(0)
        self.backgrounds = [
            FeField(self.mesh, y.values, name="y_background") for y in self.states
        ]
        record = IterationRecord(
            k=0,
            u=zero,
            eta=None,
            lam=None,
            solve_count=self.counter.total,
            residuals=[
                self._boundary_norm(trace(bg).values - self._completed(i).values)
                for i, bg in enumerate(self.backgrounds)
            ],
            scales=self.state.scales,
        )
        self.history.append(record)
        return record

    def _completed(self, index):
        if self.config.full_data:
            return self.data[index]
        return complete_data(self.data[index], self.states[index], self.partition)

    def iterate(self):
        """One pass of the loop, producing ``u^{k+1}``."""
        if not self.history:
            self.initialize()
        config = self.config
        problem = self.problem
        state = self.state
        k = self.iterations_done
        last = k == config.max_iterations - 1

        # Dual function of the completed data
        residuals = []
        for index, background in enumerate(self.backgrounds):
            reference = trace(background).values
            residuals.append(
                self._significant(reference - self._completed(index).values, reference)
            )
        with self.counter.stage(STAGE_ADJOINT):
            zeta = self._lift(self.u, self.states, residuals)

        normalize = config.initial_scaling == SCALING_NORMALIZE
        if k == 0 and normalize and not zeta.is_zero():
            normalize_scaling(state, zeta, config.boxes)

        # Index function and projection
        eta_rows = resolve(state, zeta.stacked)
        eta = [
            FeField(self.mesh, row, name=f"eta_{name}")
            for row, name in zip(eta_rows, problem.type_names)
        ]
        u_next = [
            project(index, box, name=f"u_{name}")
            for index, box, name in zip(eta, config.boxes, problem.type_names)
        ]
        states = []
        with self.counter.stage(STAGE_FORWARD):
            for f in self.fluxes:
                self.counter.dataset()
                states.append(solve_forward(problem, u_next, f, counter=self.counter))

        record = IterationRecord(
            k=k + 1,
            u=u_next,
            eta=eta,
            lam=None,
            solve_count=0,
            residuals=[self._boundary_norm(values) for values in residuals],
        )
        if not last:
            self._correct(record, u_next, states)
        else:
            self.states = states

        record.solve_count = self.counter.total
        record.rank = len(state.terms)
        record.scales = state.scales
        self.u = u_next
        self.history.append(record)
        log.info(
            "Iteration %s: lambda=%s damping=%s rank=%s C_D=%s pairing=%s solves=%s",
            record.k,
            record.lam,
            record.damping_factor,
            record.rank,
            record.scales,
            record.pairing,
            record.solve_count,
        )
        return record

    def _correct(self, record, u_next, states):
        """Stabilize the resolver and correct it with the auxiliary pair."""
        problem = self.problem
        state = self.state
        if problem.linear_background:
            backgrounds = self.backgrounds
        else:
            backgrounds = []
            with self.counter.stage(STAGE_BACKGROUND):
                for f, y in zip(self.fluxes, states):
                    self.counter.dataset()
                    backgrounds.append(
                        solve_background(problem, u_next, f, y=y, counter=self.counter)
                    )

        residuals = []
        for background, y in zip(backgrounds, states):
            reference = trace(background).values
            residuals.append(self._significant(reference - trace(y).values, reference))
        with self.counter.stage(STAGE_AUXILIARY_ADJOINT):
            zeta_hat = self._lift(u_next, states, residuals)
        self.states = states
        self.backgrounds = backgrounds

        stabilize(state)
        record.probe_ratio = self._check_probes(record.k - 1)

        r_zeta = resolve(state, zeta_hat.stacked)
        eta_hat = auxiliary_index(u_next, r_zeta, zeta_hat, self.config.boxes)
        s = zeta_hat.pairing(eta_hat)
        t = zeta_hat.pairing(r_zeta)
        record.pairing = s
        if zeta_hat.is_zero() or not (s > 0.0 and t > 0.0):
            log.warning(
                "Skipping the resolver update at k=%s: "
                "<zeta, eta>=%s <zeta, R zeta>=%s",
                record.k - 1,
                s,
                t,
            )
            record.skipped = True
            record.lam = 0.0
        else:
            lowrank_update(state, eta_hat, zeta_hat, r_zeta)
            record.secant = secant_residual(state, eta_hat, zeta_hat)
            update_scaling(state, eta_hat, zeta_hat)
            record.lam = compute_damping(state, eta_hat, zeta_hat, r_zeta)
        state.lambda_prev = record.lam

    def _check_probes(self, k):
        """Largest ratio of the two sides of the spectral bound over random probes."""
        count = self.probe_count
        if count is None:
            count = settings.IDSM_PROBE_COUNT
        seed = self.probe_seed
        if seed is None:
            seed = settings.IDSM_PROBE_SEED
        if count == 0:
            return None
        rng = np.random.default_rng([seed, k])
        probes = rng.standard_normal(
            (count, self.state.type_count, self.mesh.node_count)
        )
        left, right = probe_bound(self.state, probes)
        ratio = float(np.max(left / right))
        self.probe_log.append(
            {
                "k": k,
                "left": float(left.max()),
                "right": float(right.min()),
                "ratio": ratio,
            }
        )
        if ratio > 1.0:
            log.warning("Resolver bound exceeded at k=%s: ratio=%.6f", k, ratio)
        return ratio

    def run(self):
        """Run all iterations and return the history."""
        if not self.history:
            self.initialize()
        while self.iterations_done < self.config.max_iterations:
            self.iterate()
        return self.history


def run(config, data, **kwargs):
    """Reconstruct from one measured boundary field per flux."""
    return Reconstruction(config, data, **kwargs).run()
