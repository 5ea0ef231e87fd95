from unittest import mock

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from django.test import tag
from hypothesis import given
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ..constants import DFP
from ..constants import STAGE_ADJOINT
from ..constants import STAGE_BACKGROUND
from ..constants import STAGE_FORWARD
from ..constants import STAGE_INITIALIZATION
from ..exceptions import IdsmError
from ..exceptions import VerificationError
from ..export import summarize
from ..fem import BoundaryField
from ..fem import FeField
from ..fem import solve_forward
from ..fem import trace
from ..iteration import complete_data
from ..iteration import expected_solves
from ..iteration import project
from ..iteration import Reconstruction
from ..iteration import run
from ..iteration import SolveCounter
from ..models import InclusionShape
from ..models import make_problem
from ..models import rasterize
from ..verification import check_solve_counts
from ..verification import SOLVE_COUNT_AUDIT
from ..workflow import generate
from .common import IdsmTestCase


FLUXES = {
    "EIT": ("sin", "cos"),
    "DOT": ("sin", "cos"),
    "CE": ("ce1", "ce2"),
    "MODULUS": ("square",),
}


class HelpersTest(IdsmTestCase):
    @settings(max_examples=50, deadline=None)
    @given(
        values=hnp.arrays(
            float, 217, elements=st.floats(-100, 100, allow_nan=False)
        )
    )
    def test_project(self, values):
        eta = FeField(self.mesh, values, name="eta")
        projected = project(eta, (-0.99, 0.0))
        self.assertTrue(np.all(projected.values >= -0.99))
        self.assertTrue(np.all(projected.values <= 0.0))
        inside = (values >= -0.99) & (values <= 0.0)
        self.assertTrue(np.array_equal(projected.values[inside], values[inside]))
        self.assertEqual(projected.name, "eta")

    def test_project_name(self):
        eta = FeField.zeros(self.mesh, name="eta")
        self.assertEqual(project(eta, (0, 1), name="u").name, "u")

    def test_complete_data(self):
        y_d = BoundaryField(self.mesh, np.ones(self.mesh.boundary_node_count))
        y_k = FeField(self.mesh, np.full(self.mesh.node_count, 5.0))
        completed = complete_data(y_d, y_k, self.partition)
        values = completed.values
        self.assertTrue(np.all(values[self.partition.dirichlet_nodes] == 1.0))
        self.assertTrue(np.all(values[self.partition.neumann_nodes] == 5.0))

    def test_expected_solves(self):
        self.assertEqual(expected_solves(10, True), 49)
        self.assertEqual(expected_solves(10, False), 58)
        self.assertEqual(expected_solves(1, True), 4)
        self.assertEqual(expected_solves(1, False), 4)

    def test_config_validation(self):
        with self.assertRaises(ValidationError):
            self.run_config(max_iterations=0)
        with self.assertRaises(ValidationError):
            self.run_config(noise=-0.1)
        with self.assertRaises(ValidationError):
            self.run_config(fluxes=())
        with self.assertRaises(ValidationError):
            self.run_config(initial_scaling="huge")


class SolveCounterTest(SimpleTestCase):
    def test_batched_datasets(self):
        counter = SolveCounter()
        with counter.stage(STAGE_ADJOINT):
            for _ in range(3):
                counter.dataset()
                counter.record()
                counter.record()
        self.assertEqual(counter.stages[STAGE_ADJOINT], 2)
        self.assertEqual(counter.total, 2)

    def test_largest_tally(self):
        counter = SolveCounter()
        with counter.stage(STAGE_FORWARD):
            counter.dataset()
            counter.record()
            counter.dataset()
            counter.record(2)
        with counter.stage(STAGE_FORWARD):
            counter.record()
        self.assertEqual(counter.stages[STAGE_FORWARD], 3)

    def test_empty_stage(self):
        counter = SolveCounter()
        with counter.stage(STAGE_BACKGROUND):
            counter.dataset()
        self.assertEqual(counter.total, 0)

    def test_outside_stage(self):
        counter = SolveCounter()
        with self.assertRaises(IdsmError):
            counter.record()
        with self.assertRaises(IdsmError):
            counter.dataset()
        with counter.stage(STAGE_FORWARD):
            with self.assertRaises(IdsmError):
                with counter.stage(STAGE_ADJOINT):
                    pass


class ZeroInclusionTest(IdsmTestCase):
    """Data of the background alone reconstructs nothing."""

    def reconstruct(self, model, **kwargs):
        problem = make_problem(model)
        zero = self.zeros(problem)
        data = []
        for name in FLUXES[model]:
            y = solve_forward(problem, zero, self.flux(name))
            values = np.where(self.partition.dirichlet_nodes, trace(y).values, 0.0)
            data.append(BoundaryField(self.mesh, values))
        config = self.run_config(model, fluxes=FLUXES[model], **kwargs)
        reconstruction = Reconstruction(
            config, data, mesh=self.mesh, partition=self.partition, probe_count=3
        )
        reconstruction.run()
        return reconstruction

    def test_all_models(self):
        for model in ("EIT", "DOT", "CE", "MODULUS"):
            with self.subTest(model=model):
                reconstruction = self.reconstruct(model, max_iterations=4)
                problem = reconstruction.problem
                self.assertEqual(reconstruction.iterations_done, 4)
                for field in reconstruction.u:
                    self.assertLessEqual(np.abs(field.values).max(), 1e-6)
                self.assertEqual(
                    reconstruction.counter.total,
                    expected_solves(4, problem.linear_background),
                )
                self.assertEqual(
                    STAGE_BACKGROUND in reconstruction.counter.stages,
                    not problem.linear_background,
                )
                counts = [record.solve_count for record in reconstruction.history]
                self.assertEqual(counts, sorted(set(counts)))

    def test_single_iteration(self):
        reconstruction = self.reconstruct("EIT", max_iterations=1)
        self.assertEqual(reconstruction.counter.total, 4)
        self.assertEqual(reconstruction.state.terms, [])
        self.assertIsNone(reconstruction.history[-1].lam)

    def test_extra_solve_fails_audit(self):
        """One more forward solve on a single dataset shows up in the count."""

        def solve_twice(problem, u, f, counter=None):
            if f.name == "f1":
                solve_forward(problem, u, f, counter=counter)
            return solve_forward(problem, u, f, counter=counter)

        with mock.patch("idsm.iteration.solve_forward", side_effect=solve_twice):
            reconstruction = self.reconstruct("EIT", max_iterations=1)
        counter = reconstruction.counter
        self.assertEqual(counter.stages[STAGE_INITIALIZATION], 2)
        self.assertEqual(counter.stages[STAGE_FORWARD], 2)
        self.assertEqual(counter.total, expected_solves(1, True) + 2)
        with self.assertRaises(VerificationError) as context:
            check_solve_counts(None, summarize(reconstruction, {}))
        self.assertEqual(context.exception.invariant, SOLVE_COUNT_AUDIT)

    def test_skipped_updates(self):
        reconstruction = self.reconstruct("DOT", max_iterations=3)
        skipped = [record.k for record in reconstruction.history if record.skipped]
        self.assertEqual(skipped, [1, 2])
        self.assertEqual(reconstruction.history[1].lam, 0.0)

    def test_dataset_count(self):
        config = self.run_config("EIT")
        with self.assertRaises(ValidationError):
            Reconstruction(config, [], mesh=self.mesh, partition=self.partition)


class InclusionRunTest(IdsmTestCase):
    def setUp(self):
        shape = InclusionShape("disk", (("conductivity", -0.9),), (0.4, 0.0), (0.3,))
        self.config = self.run_config("EIT", shapes=(shape,), max_iterations=4)
        self.setup, self.data = generate(self.config)

    def reconstruct(self, config=None, **kwargs):
        reconstruction = Reconstruction(
            config or self.config,
            self.data,
            mesh=self.setup.mesh,
            partition=self.setup.partition,
            **kwargs,
        )
        reconstruction.run()
        return reconstruction

    def test_run(self):
        reconstruction = self.reconstruct()
        history = reconstruction.history
        self.assertEqual(len(history), 5)
        self.assertEqual(reconstruction.counter.total, expected_solves(4, True))

        for record in history:
            for field, (lower, upper) in zip(record.u, self.config.boxes):
                self.assertGreaterEqual(field.values.min(), lower)
                self.assertLessEqual(field.values.max(), upper)
        self.assertIsNone(history[-1].lam)

        updated = [record for record in history[1:-1] if not record.skipped]
        for record in history[1:-1]:
            self.assertGreaterEqual(record.lam, 0.0)
        for record in updated:
            self.assertLess(record.secant, 1e-8)
            self.assertEqual(record.rank % 3, 0)
        if updated:
            self.assertEqual(updated[0].lam, 1.0)

        probe_log = reconstruction.probe_log
        self.assertEqual([entry["k"] for entry in probe_log], [0, 1, 2])
        self.assertTrue(all(entry["ratio"] <= 1.0 for entry in probe_log))

    def test_deterministic(self):
        first = self.reconstruct()
        second = self.reconstruct()
        for left, right in zip(first.history, second.history):
            self.assertTrue(np.array_equal(left.u[0].values, right.u[0].values))
            self.assertEqual(left.lam, right.lam)

    def test_undamped(self):
        config = self.run_config(
            "EIT", shapes=self.config.shapes, max_iterations=3, damping=False
        )
        reconstruction = self.reconstruct(config, probe_count=0)
        self.assertEqual(reconstruction.probe_log, [])
        for record in reconstruction.history[1:-1]:
            self.assertEqual(record.lam, 0.0)

    def test_dfp(self):
        config = self.run_config(
            "EIT", shapes=self.config.shapes, max_iterations=3, scheme=DFP
        )
        history = run(
            config, self.data, mesh=self.setup.mesh, partition=self.setup.partition
        )
        self.assertEqual(len(history), 4)


@tag("slow")
class SemilinearRunTest(IdsmTestCase):
    def test_cardiac(self):
        shape = InclusionShape("disk", (("ischemia", 1.0),), (0.3, 0.3), (0.3,))
        config = self.run_config(
            "CE", fluxes=FLUXES["CE"], shapes=(shape,), max_iterations=3
        )
        setup, data = generate(config)
        reconstruction = Reconstruction(
            config, data, mesh=setup.mesh, partition=setup.partition
        )
        reconstruction.run()
        self.assertEqual(reconstruction.counter.total, expected_solves(3, False))
        for field in reconstruction.u:
            self.assertGreaterEqual(field.values.min(), 0.0)
            self.assertLessEqual(field.values.max(), 1.0)


def jaccard(first, second):
    union = np.count_nonzero(first | second)
    if union == 0:
        return 0.0
    return np.count_nonzero(first & second) / union


@tag("slow")
class ConvergenceTest(IdsmTestCase):
    def test_support_overlap(self):
        shape = InclusionShape("disk", (("conductivity", -0.9),), (0.4, 0.0), (0.3,))
        config = self.run_config("EIT", shapes=(shape,), max_iterations=10)
        setup, data = generate(config)
        reconstruction = Reconstruction(
            config, data, mesh=setup.mesh, partition=setup.partition
        )
        reconstruction.run()

        (truth,) = rasterize((shape,), setup.mesh, ("conductivity",))
        inside = truth.values < 0.0

        def overlap(record):
            values = record.u[0].values
            if not np.any(values < 0.0):
                return 0.0
            return jaccard(inside, values <= 0.5 * values.min())

        history = reconstruction.history
        self.assertEqual(overlap(history[0]), 0.0)
        self.assertGreaterEqual(overlap(history[-1]), 0.3)
        self.assertGreater(overlap(history[-1]), overlap(history[0]))
        self.assertTrue(
            all(entry["ratio"] <= 1.0 for entry in reconstruction.probe_log)
        )

    def test_damping_by_p_index(self):
        """A larger integrability index damps the corrections more."""
        shapes = (
            InclusionShape("disk", (("conductivity", -0.9),), (0.4, 0.0), (0.3,)),
            InclusionShape("disk", (("potential", 9.0),), (-0.4, 0.0), (0.3,)),
        )
        factors = {}
        for p_index in (1.0, 99.0):
            config = self.run_config(
                "DOT",
                fluxes=FLUXES["DOT"],
                shapes=shapes,
                max_iterations=10,
                p_index=p_index,
            )
            setup, data = generate(config)
            reconstruction = Reconstruction(
                config, data, mesh=setup.mesh, partition=setup.partition
            )
            reconstruction.run()
            updated = [
                record.damping_factor
                for record in reconstruction.history[2:-1]
                if not record.skipped
            ]
            self.assertTrue(updated)
            factors[p_index] = np.mean(updated)
        self.assertLess(factors[99.0], factors[1.0])
