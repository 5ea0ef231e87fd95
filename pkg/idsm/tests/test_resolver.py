import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..constants import BFG
from ..constants import DFP
from ..exceptions import PreconditionError
from ..fem import FeField
from ..fem import lp_norm
from ..mesh import CoarseMap
from ..mesh import distance_to_boundary
from ..mesh import Mesh
from ..models import make_problem
from ..resolver import apply_R0
from ..resolver import apply_resolver
from ..resolver import apply_S
from ..resolver import auxiliary_index
from ..resolver import build_diag
from ..resolver import build_resolver
from ..resolver import compute_damping
from ..resolver import DiagonalD
from ..resolver import lowrank_update
from ..resolver import normalize_scaling
from ..resolver import probe_bound
from ..resolver import resolve
from ..resolver import ResolverState
from ..resolver import secant_residual
from ..resolver import singular_part
from ..resolver import stabilize
from ..resolver import update_scaling
from .common import IdsmTestCase


class ResolverTestCase(IdsmTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(13)
        self.problem = make_problem("DOT")

    def state(self, scheme=BFG, **kwargs):
        return build_resolver(
            self.problem,
            self.partition,
            self.coarse_map,
            self.params,
            2.0,
            scheme,
            **kwargs,
        )

    def loads(self):
        return self.rng.normal(size=(2, self.mesh.node_count))

    def positive_pair(self):
        """A load and an index function with positive pairings."""
        loads = np.abs(self.rng.normal(size=(2, self.mesh.node_count)))
        eta = np.abs(self.rng.normal(size=(2, self.mesh.node_count)))
        return loads, eta


class DiagonalTest(ResolverTestCase):
    def test_band(self):
        diagonal = build_diag(self.mesh, self.partition, self.params, 4.0)
        band = distance_to_boundary(self.mesh.nodes) < diagonal.eps_band
        self.assertTrue(band.any())
        self.assertTrue(np.all(diagonal.values[band] == 0))
        self.assertTrue(np.all(diagonal.values[~band] > 0))

    def test_band_width(self):
        with self.assertRaises(ValidationError):
            build_diag(self.mesh, self.partition, self.params, 4.0, eps_band=1.5)

    def test_mirror_symmetry(self):
        """Uniform weights treat both halves alike; split weights do not."""
        near = np.argmin(np.linalg.norm(self.mesh.nodes - (0.5, 0.0), axis=1))
        far = np.argmin(np.linalg.norm(self.mesh.nodes - (-0.5, 0.0), axis=1))

        uniform = build_diag(self.mesh, self.partition, self.params.uniform(0.05), 2.0)
        self.assertAlmostEqual(
            uniform.values[near] / uniform.values[far], 1.0, places=9
        )
        split = build_diag(self.mesh, self.partition, self.params, 2.0)
        self.assertNotAlmostEqual(split.values[near] / split.values[far], 1.0, places=3)


class SingularPartTest(ResolverTestCase):
    def test_symmetric(self):
        state = self.state()
        first, second = self.loads(), self.loads()
        left = np.sum(first * singular_part(state, second))
        right = np.sum(second * singular_part(state, first))
        self.assertAlmostEqual(left, right, delta=1e-10 * max(abs(left), 1.0))

    def test_positive(self):
        state = self.state()
        for _ in range(10):
            loads = self.loads()
            self.assertGreaterEqual(np.sum(loads * singular_part(state, loads)), 0.0)

    def test_fields(self):
        state = self.state()
        loads = self.loads()
        fields = apply_R0(state, loads)
        self.assertEqual(len(fields), 2)
        self.assertTrue(np.allclose(fields[0].values, singular_part(state, loads)[0]))
        # Without corrections the resolver is its singular part
        resolved = apply_resolver(state, loads)
        self.assertTrue(np.allclose(resolved[1].values, fields[1].values))

    def test_validation(self):
        with self.assertRaises(ValidationError):
            self.state(scheme="sr1")
        with self.assertRaises(ValidationError):
            ResolverState(diagonals=[], coarse_map=self.coarse_map, p_index=0.5)


class LowRankTest(ResolverTestCase):
    def test_secant(self):
        for scheme in (DFP, BFG):
            with self.subTest(scheme=scheme):
                state = self.state(scheme)
                loads, eta = self.positive_pair()
                lowrank_update(state, eta, loads)
                self.assertEqual(state.pending, 2 if scheme == DFP else 3)
                self.assertLess(secant_residual(state, eta, loads), 1e-10)
                self.assertTrue(np.allclose(resolve(state, loads), eta))

    def test_consistent_pair(self):
        """An index the resolver already produces adds a zero correction."""
        for scheme in (DFP, BFG):
            with self.subTest(scheme=scheme):
                state = self.state(scheme)
                loads = np.abs(self.rng.normal(size=(2, self.mesh.node_count)))
                eta = resolve(state, loads)
                other = self.loads()
                before = resolve(state, other)
                lowrank_update(state, eta, loads)
                after = resolve(state, other)
                scale = np.abs(before).max()
                self.assertLessEqual(np.abs(after - before).max(), 1e-12 * scale)

    def test_nonpositive_pairing(self):
        state = self.state()
        loads, eta = self.positive_pair()
        with self.assertRaises(PreconditionError):
            lowrank_update(state, -eta, loads)
        self.assertEqual(state.terms, [])

    def test_stabilize(self):
        state = self.state(DFP)
        loads, eta = self.positive_pair()
        lowrank_update(state, eta, loads)
        state.lambda_prev = 1.0
        stabilize(state)
        self.assertEqual(state.pending, 0)
        self.assertEqual([term.damping for term in state.terms], [0.5, 0.5])
        projected = np.vstack([field.values for field in apply_S(state, eta)])
        self.assertTrue(np.allclose(state.terms[0].left, projected))
        self.assertTrue(np.allclose(state.terms[0].right, projected))

        # Only the latest correction is projected, every term is damped again
        stabilize(state)
        self.assertTrue(np.allclose(state.terms[0].left, projected))
        self.assertEqual([term.damping for term in state.terms], [0.25, 0.25])

    def test_stabilize_undamped(self):
        state = self.state(DFP, damping=False)
        loads, eta = self.positive_pair()
        lowrank_update(state, eta, loads)
        state.lambda_prev = 3.0
        stabilize(state)
        self.assertEqual([term.damping for term in state.terms], [1.0, 1.0])


class DampingTest(ResolverTestCase):
    def test_calibration(self):
        for scheme in (DFP, BFG):
            with self.subTest(scheme=scheme):
                state = self.state(scheme)
                loads, eta = self.positive_pair()
                r_zeta = resolve(state, loads)
                self.assertEqual(compute_damping(state, eta, loads, r_zeta), 1.0)
                self.assertIsNotNone(state.c_lambda)

                loads, eta = self.positive_pair()
                r_zeta = resolve(state, loads)
                self.assertGreaterEqual(
                    compute_damping(state, eta, loads, r_zeta), 0.0
                )

    def test_disabled(self):
        state = self.state(damping=False)
        loads, eta = self.positive_pair()
        r_zeta = resolve(state, loads)
        self.assertEqual(compute_damping(state, eta, loads, r_zeta), 0.0)

    def test_precondition(self):
        state = self.state()
        loads, eta = self.positive_pair()
        with self.assertRaises(PreconditionError):
            compute_damping(state, -eta, loads, resolve(state, loads))


class ScalingTest(ResolverTestCase):
    def test_update_scaling(self):
        state = self.state()
        loads, eta = self.positive_pair()
        update_scaling(state, eta, loads)
        for row, diagonal in enumerate(state.diagonals):
            self.assertAlmostEqual(
                np.sum(diagonal.values * np.abs(loads[row])),
                lp_norm(self.mesh, eta[row], 1.0),
            )

    def test_zero_denominator(self):
        state = self.state()
        before = state.scales
        ones = np.ones((2, self.mesh.node_count))
        update_scaling(state, ones, 0 * ones)
        self.assertEqual(state.scales, before)

    def test_normalize(self):
        state = self.state()
        loads = self.loads()
        normalize_scaling(state, loads, self.problem.boxes)
        values = singular_part(state, loads)
        self.assertAlmostEqual(np.abs(values[0]).max(), 0.99)
        self.assertAlmostEqual(np.abs(values[1]).max(), 19.0)


class ProbeBoundTest(ResolverTestCase):
    def test_fresh_resolver(self):
        state = self.state()
        probes = self.rng.normal(size=(20, 2, self.mesh.node_count))
        left, right = probe_bound(state, probes)
        self.assertTrue(np.all(left >= 0))
        self.assertTrue(np.all(left <= right))

    def test_point_probe(self):
        state = self.state()
        probe = np.zeros((1, 2, self.mesh.node_count))
        probe[0, 0, 0] = 1.0
        left, right = probe_bound(state, probe)
        self.assertLessEqual(left[0], right[0])


class AuxiliaryIndexTest(ResolverTestCase):
    def test_interior(self):
        u = [FeField(self.mesh, np.full(self.mesh.node_count, -0.5))]
        r_zeta = np.full((1, self.mesh.node_count), -2.0)
        loads = np.ones((1, self.mesh.node_count))
        eta_hat = auxiliary_index(u, r_zeta, loads, [(-0.99, 0.0)])
        self.assertTrue(np.allclose(eta_hat[0].values, -0.5))

    def test_splice_at_bounds(self):
        values = np.full(self.mesh.node_count, -0.5)
        values[:10] = 0.0
        values[10:20] = -0.99
        u = [FeField(self.mesh, values)]
        r_zeta = np.full((1, self.mesh.node_count), 0.0)
        r_zeta[0, :10] = 0.3
        r_zeta[0, 10:20] = -1.5
        loads = -np.ones((1, self.mesh.node_count))
        eta_hat = auxiliary_index(u, r_zeta, loads, [(-0.99, 0.0)])
        result = eta_hat[0].values
        self.assertTrue(np.allclose(result[:10], 0.3))
        self.assertTrue(np.allclose(result[10:20], -1.5))
        self.assertTrue(np.allclose(result[20:], -0.5))
        self.assertGreater(np.sum(loads * result), 0.0)

    def test_sign_change_guard(self):
        """A splice with a negative pairing is blended back to a positive one."""
        values = np.full(self.mesh.node_count, -0.5)
        values[:10] = 0.0
        u = [FeField(self.mesh, values)]
        r_zeta = np.full((1, self.mesh.node_count), -10.0)
        r_zeta[0, :10] = 100.0
        loads = -np.ones((1, self.mesh.node_count))
        on_u = float(np.sum(loads * values))
        self.assertGreater(on_u, 0.0)
        spliced = values.copy()
        spliced[:10] = 100.0
        self.assertLess(float(np.sum(loads * spliced)), 0.0)

        eta_hat = auxiliary_index(u, r_zeta, loads, [(-0.99, 0.0)])
        result = eta_hat[0].values
        self.assertAlmostEqual(float(np.sum(loads * result)), on_u / 2.0)
        self.assertTrue(np.array_equal(np.clip(result, -0.99, 0.0), values))
        self.assertTrue(np.all(result[:10] > 0.0))
        self.assertTrue(np.array_equal(result[10:], values[10:]))


def expected_auxiliary_index(u, r_zeta, loads, boxes):
    lower = np.array([box[0] for box in boxes])[:, None]
    upper = np.array([box[1] for box in boxes])[:, None]
    tilde = np.where(
        u == upper,
        np.maximum(upper, r_zeta),
        np.where(u == lower, np.minimum(lower, r_zeta), u),
    )
    on_u = (loads * u).sum()
    on_resolver = (loads * r_zeta).sum()
    on_tilde = (loads * tilde).sum()
    weight = 1.0
    if on_u > on_resolver > on_tilde:
        weight = np.clip(on_u / (2.0 * (on_u - on_resolver)), 0.0, 1.0)
    if on_u > 0.0 and (1.0 - weight) * on_u + weight * on_tilde <= 0.0:
        weight = on_u / (2.0 * (on_u - on_tilde))
    return u + weight * (tilde - u), weight


class AuxiliaryIndexSweepTest(IdsmTestCase):
    def test_random_instances(self):
        rng = np.random.default_rng(17)
        mesh = self.coarse_mesh
        boxes = make_problem("DOT").boxes
        lower = np.array([box[0] for box in boxes])[:, None]
        upper = np.array([box[1] for box in boxes])[:, None]
        shape = (len(boxes), mesh.node_count)
        positive = blended = 0
        for _ in range(10000):
            interior = lower + (upper - lower) * rng.uniform(0.01, 0.99, shape)
            where = rng.integers(0, 3, shape)
            values = np.where(where == 0, lower, np.where(where == 1, upper, interior))
            width = upper - lower
            r_zeta = lower + width * rng.normal(0.5, 1.5, shape)
            loads = rng.normal(size=shape)

            u = [FeField(mesh, row) for row in values]
            eta_hat = auxiliary_index(u, r_zeta, loads, boxes)
            result = np.vstack([field.values for field in eta_hat])
            expected, weight = expected_auxiliary_index(values, r_zeta, loads, boxes)

            self.assertTrue(np.allclose(result, expected))
            self.assertTrue(np.array_equal(np.clip(result, lower, upper), values))
            self.assertTrue(0.0 <= weight <= 1.0)
            if (loads * values).sum() > 0.0:
                positive += 1
                self.assertGreater((loads * result).sum(), 0.0)
            if weight < 1.0:
                blended += 1
        self.assertGreater(positive, 1000)
        self.assertGreater(blended, 10)


class DenseResolverTest(SimpleTestCase):
    """One triangle, one coarse cell and matrices written out in full."""

    def setUp(self):
        self.mesh = Mesh(
            [(0, 0), (1, 0), (0, 1)], [(0, 1, 2)], [(0, 1), (1, 2), (2, 0)]
        )
        coarse_map = CoarseMap(self.mesh, self.mesh, [0])
        self.kernel = np.array([1.0, 2.0, 3.0])
        diagonal = DiagonalD(self.mesh, self.kernel, gamma=1.0, eps_band=0.1)
        self.state = ResolverState(
            diagonals=[diagonal], coarse_map=coarse_map, scheme=DFP
        )
        self.rng = np.random.default_rng(23)

    def dense_singular_part(self):
        roots = np.diag(np.sqrt(self.kernel))
        transfer = np.ones((3, 1))
        return roots @ transfer @ np.diag([1.0 / 0.5]) @ transfer.T @ roots

    def test_dfp_update(self):
        r0 = self.dense_singular_part()
        zeta = self.rng.normal(size=3)
        eta = self.rng.normal(size=3)
        if eta @ zeta < 0.0:
            eta = -eta
        r_zeta = r0 @ zeta
        expected = (
            r0
            + np.outer(eta, eta) / (eta @ zeta)
            - np.outer(r_zeta, r_zeta) / (zeta @ r_zeta)
        )

        for loads in np.eye(3):
            self.assertTrue(
                np.allclose(singular_part(self.state, loads[None, :])[0], r0 @ loads)
            )
        lowrank_update(self.state, eta[None, :], zeta[None, :])
        self.assertEqual(len(self.state.terms), 2)
        for loads in np.vstack([np.eye(3), self.rng.normal(size=(5, 3))]):
            self.assertTrue(
                np.allclose(resolve(self.state, loads[None, :])[0], expected @ loads)
            )
        self.assertTrue(np.allclose(resolve(self.state, zeta[None, :])[0], eta))
