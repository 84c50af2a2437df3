import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relform.dynamics import VehicleState
from relform.env import WorldState
from relform.geometry import (
    DegenerateLayoutError,
    RigidTransform,
    apply_rigid_transform,
    brute_force_formation_error,
    formation_error,
    normalization_factor,
    optimal_alignment,
    regular_polygon,
    relative_topology,
)

UNIT_SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)

coord = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def layouts(n_min=2, n_max=6):
    return st.integers(n_min, n_max).flatmap(
        lambda n: st.lists(st.tuples(coord, coord), min_size=n, max_size=n).map(np.array)
    )


transforms = st.builds(RigidTransform, st.floats(0, 2 * math.pi - 1e-9), st.tuples(coord, coord))


def make_world(pos, heading, alive=None):
    pos = np.asarray(pos, float)
    n = len(pos)
    alive = np.ones(n, bool) if alive is None else np.asarray(alive, bool)
    return WorldState(VehicleState(pos, heading), alive, np.zeros((0, 2)), np.zeros(0), np.zeros(2), 0.01, {})


class TestRigidTransform:
    def test_identity(self):
        assert np.allclose(apply_rigid_transform([[1, 0]], RigidTransform()), [[1, 0]])

    def test_half_turn(self):
        assert np.allclose(apply_rigid_transform([[1, 0]], RigidTransform(math.pi)), [[-1, 0]])

    def test_pure_translation(self):
        out = apply_rigid_transform([[0, 0], [1, 0]], RigidTransform(0, (2, 3)))
        assert np.allclose(out, [[2, 3], [3, 3]])

    def test_angle_stored_in_zero_two_pi(self):
        assert RigidTransform(-math.pi / 2).angle == pytest.approx(1.5 * math.pi)

    @given(transforms, transforms, layouts(1, 5))
    def test_composition_closure(self, a, b, p):
        direct = apply_rigid_transform(apply_rigid_transform(p, b), a)
        composed = apply_rigid_transform(p, a.compose(b))
        assert np.allclose(direct, composed, atol=1e-9)

    @given(transforms, layouts(1, 5))
    def test_inverse(self, a, p):
        back = apply_rigid_transform(apply_rigid_transform(p, a), a.inverse())
        assert np.allclose(back, p, atol=1e-9)


class TestFormationError:
    def test_identical(self):
        assert formation_error(UNIT_SQUARE, UNIT_SQUARE) == pytest.approx(0, abs=1e-12)

    def test_scaled_square_fixture(self):
        assert formation_error(UNIT_SQUARE, 2 * UNIT_SQUARE) == pytest.approx(2.0, abs=1e-12)

    def test_scaled_square_oracle(self):
        # grid oracle at 1e-4 rad confirms the frozen value
        assert brute_force_formation_error(UNIT_SQUARE, 2 * UNIT_SQUARE, 1e-4) == pytest.approx(2.0, abs=1e-6)

    def test_mismatched_sizes(self):
        with pytest.raises(ValueError):
            formation_error(UNIT_SQUARE, UNIT_SQUARE[:3])

    def test_reflection_is_not_free(self):
        tri = np.array([[0, 0], [2, 0], [0.5, 1.0]])
        mirrored = tri * np.array([1, -1])
        assert formation_error(tri, mirrored) > 0.1

    def test_optimal_alignment_reaches_minimum(self):
        rng = np.random.default_rng(3)
        p, q = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        w = optimal_alignment(p, q)
        assert np.sum((p - apply_rigid_transform(q, w)) ** 2) == pytest.approx(formation_error(p, q), abs=1e-12)

    @settings(max_examples=200)
    @given(layouts(), transforms)
    def test_equivalent_under_rigid_motion(self, p, xf):
        assert formation_error(p, apply_rigid_transform(p, xf)) < 1e-7 * (1 + np.sum(p * p))

    @settings(max_examples=200)
    @given(st.integers(2, 6).flatmap(lambda n: st.tuples(*[st.lists(st.tuples(coord, coord), min_size=n, max_size=n)] * 2)))
    def test_symmetric_and_nonnegative(self, pq):
        p, q = map(np.array, pq)
        e = formation_error(p, q)
        assert e >= 0
        assert e == pytest.approx(formation_error(q, p), abs=1e-9 * (1 + e))

    def test_rigid_invariance_tight(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = rng.integers(2, 7)
            p, q = rng.uniform(-3, 3, (n, 2)), rng.uniform(-3, 3, (n, 2))
            xf = RigidTransform(rng.uniform(0, 2 * math.pi), tuple(rng.uniform(-5, 5, 2)))
            assert abs(formation_error(apply_rigid_transform(p, xf), q) - formation_error(p, q)) < 1e-9


class TestBruteForce:
    def test_identical(self):
        assert brute_force_formation_error(UNIT_SQUARE, UNIT_SQUARE, 1e-3) <= 1e-4

    def test_two_point_fixture(self):
        assert brute_force_formation_error([[0, 0], [1, 0]], [[0, 0], [2, 0]], 1e-3) == pytest.approx(0.5, abs=1e-9)

    def test_agrees_with_closed_form(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            p, q = rng.uniform(-2, 2, (5, 2)), rng.uniform(-2, 2, (5, 2))
            bf = brute_force_formation_error(p, q, 1e-3)
            cf = formation_error(p, q)
            assert bf >= cf - 1e-12
            assert bf - cf < 1e-4

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            brute_force_formation_error(UNIT_SQUARE, UNIT_SQUARE, 0)


class TestNormalizationFactor:
    @pytest.mark.parametrize(
        "layout, expected",
        [
            (4 * UNIT_SQUARE, 32.0),
            ([[0, 0], [1, 0]], 1.0),
            ([[0, 0], [2, 0], [1, math.sqrt(3)]], 4.0),
        ],
    )
    def test_values(self, layout, expected):
        assert normalization_factor(layout) == pytest.approx(expected, abs=1e-12)

    def test_side_four_square_exact(self):
        assert normalization_factor(4 * UNIT_SQUARE) == 32.0

    def test_degenerate(self):
        with pytest.raises(DegenerateLayoutError):
            normalization_factor([[1, 1], [1, 1]])

    @given(transforms)
    def test_invariant_under_motion(self, xf):
        q = regular_polygon(5, 2.0)
        assert normalization_factor(apply_rigid_transform(q, xf)) == pytest.approx(normalization_factor(q), rel=1e-9)


class TestRelativeTopology:
    def test_ego_heading_zero(self):
        w = make_world([[0, 0], [1, 0]], [0, 0])
        assert np.allclose(relative_topology(w, 0)[1], [1, 0])

    def test_ego_heading_quarter_turn(self):
        w = make_world([[0, 0], [1, 0]], [math.pi / 2, 0])
        assert np.allclose(relative_topology(w, 0)[1], [0, -1])

    def test_dead_ego(self):
        w = make_world([[0, 0], [1, 0], [2, 2]], [0, 0, 0], alive=[True, False, True])
        with pytest.raises(ValueError):
            relative_topology(w, 1)
        assert relative_topology(w, 0).shape == (2, 2)

    def test_error_same_from_every_ego(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            w = make_world(rng.uniform(-3, 3, (n, 2)), rng.uniform(-math.pi, math.pi, n))
            q = regular_polygon(n, 2.0)
            errs = [formation_error(relative_topology(w, i), q) for i in range(n)]
            glob = formation_error(w.vehicles.position, q)
            assert max(errs) - min(errs) < 1e-9
            assert abs(errs[0] - glob) < 1e-9


def test_regular_polygon_side_lengths():
    for n in range(3, 7):
        q = regular_polygon(n, 2.0)
        sides = np.linalg.norm(q - np.roll(q, -1, axis=0), axis=1)
        assert np.allclose(sides, 2.0)
