"""
Testing of the simplex module.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pytest import approx

from multipd.simplex import (DomainError, FlatSimplexPoint, KingmanPoint, OrderedMassVector,
                             SimplexPoint, ThetaParams, Tolerances, boundary_limit_points,
                             boundary_sequence, compose_S, decompose_S, rank, rank_blocks)


class TestTolerances:

    @pytest.fixture(autouse=True)
    def reset_tolerances(self):
        yield
        Tolerances.reset_default_attribute_values()

    def test_get_attributes(self):
        """All tolerances are gathered with their default values."""
        assert Tolerances.get_attributes() == {'simplex': 1e-9, 'theta_sum': 1e-12,
                                               'mass_floor': 1e-8, 'rejection_cap': 1e-3,
                                               'max_projection_move': 0.5}

    @pytest.mark.parametrize('invalid_param',
                             [{'simplex': 0},
                              {'mass_floor': -1e-8},
                              {'rejection_cap': 1.5},
                              {'wrong_name': 1e-3}])
    def test_update_attributes_fail(self, invalid_param):
        """Invalid tolerance updates raise ValueError."""
        with pytest.raises(ValueError):
            Tolerances.update_attributes(invalid_param)

    def test_update_and_reset(self):
        Tolerances.update_attributes({'mass_floor': 1e-6})
        assert Tolerances.mass_floor == 1e-6
        Tolerances.reset_default_attribute_values()
        assert Tolerances.mass_floor == 1e-8


class TestThetaParams:

    def test_theta_bar(self):
        theta = ThetaParams([2, 3])
        assert theta.theta_bar == 5
        assert theta.H == 2

    def test_from_string(self):
        assert ThetaParams.from_string('2,3') == ThetaParams([2.0, 3.0])

    @pytest.mark.parametrize('theta', [[], [2, 0], [1, -1], [float('nan')]])
    def test_invalid(self, theta):
        """Empty or nonpositive parameters are rejected."""
        with pytest.raises(ValueError):
            ThetaParams(theta)

    def test_unparsable_string(self):
        with pytest.raises(ValueError):
            ThetaParams.from_string('2,x')

    @pytest.mark.parametrize('theta, valid', [([1.5, 1.5], True), ([1, 2], True),
                                              ([0.9, 2], False)])
    def test_diffusion_valid(self, theta, valid):
        """Diffusion validity needs every theta_h >= 1."""
        assert ThetaParams(theta).diffusion_valid() is valid

    def test_require_diffusion_valid(self):
        with pytest.raises(ValueError):
            ThetaParams([0.9, 0.9]).require_diffusion_valid()


class TestCompose:

    def test_compose_flat(self):
        """Composition scales each frequency vector by its mark mass."""
        z = compose_S([0.5, 0.5], [np.array([1.0, 0.0]), np.array([0.5, 0.5])])
        assert isinstance(z, FlatSimplexPoint)
        assert z.blocks() == approx(np.array([[0.5, 0.0], [0.25, 0.25]]))

    def test_compose_kingman(self):
        z = compose_S([0.25, 0.75], [OrderedMassVector([0.5, 0.5]),
                                     OrderedMassVector([1.0])])
        assert isinstance(z, KingmanPoint)
        assert z.masses == approx([0.25, 0.75])
        assert z[0].atoms == approx([0.125, 0.125])

    def test_decompose_empty_mark(self):
        """A point with an empty mark cannot be decomposed."""
        z = FlatSimplexPoint([1.0, 0.0, 0.0, 0.0], 2, 2)
        with pytest.raises(DomainError):
            decompose_S(z)

    def test_decompose_after_compose(self):
        w = SimplexPoint([0.2, 0.3, 0.5])
        x = [np.array([0.1, 0.9]), np.array([0.5, 0.5]), np.array([0.7, 0.3])]
        w2, x2 = decompose_S(compose_S(w, x))
        assert w2.w == approx(w.w)
        for a, b in zip(x, x2):
            assert b == approx(a)

    def test_mass_mismatch(self):
        """Frequency vectors must have mass one."""
        with pytest.raises(ValueError):
            compose_S([0.5, 0.5], [np.array([0.5, 0.4]), np.array([0.5, 0.5])])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=4),
           st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_composed_masses(self, raw, K, seed):
        """Block masses of a composition are the mark masses."""
        rng = np.random.default_rng(seed)
        w = np.array(raw) / math.fsum(raw)
        x = [rng.dirichlet(np.ones(K)) for _ in raw]
        z = compose_S(w, x)
        assert z.masses == approx(w)


def random_decomposition(rng, H, K):
    """Mark masses and within-mark frequencies drawn from flat Dirichlet laws."""
    return rng.dirichlet(np.ones(H)), [rng.dirichlet(np.ones(K)) for _ in range(H)]


def sorted_desc(x):
    return -np.sort(-np.asarray(x, dtype=float))


class TestMapIdentities:

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
    def test_compose_commutes_with_rank(self, H, K, seed):
        """Ranking the frequencies before or after composing gives the same point."""
        rng = np.random.default_rng(seed)
        for _ in range(25):
            w, x = random_decomposition(rng, H, K)
            before = compose_S(w, [rank(x_h) for x_h in x])
            after = rank_blocks(compose_S(w, x))
            for h in range(H):
                assert np.max(np.abs(before[h].atoms - after[h].atoms)) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
    def test_decompose_commutes_with_rank(self, H, K, seed):
        """Decomposing a ranked point ranks the decomposed frequencies."""
        rng = np.random.default_rng(seed)
        for _ in range(25):
            z = FlatSimplexPoint(rng.dirichlet(np.ones(H * K)), H, K)
            w_ranked, x_ranked = decompose_S(rank_blocks(z))
            w, x = decompose_S(z)
            assert np.max(np.abs(w_ranked.w - w.w)) < 1e-12
            for x_h, ranked_h in zip(x, x_ranked):
                assert np.max(np.abs(ranked_h.atoms - sorted_desc(x_h))) < 1e-12

    def test_round_trip_many_points(self):
        """compose_S and decompose_S are inverse on interior points."""
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(10 ** 4):
            H, K = rng.integers(1, 5), rng.integers(1, 6)
            w, x = random_decomposition(rng, H, K)
            w2, x2 = decompose_S(compose_S(w, x))
            worst = max(worst, np.max(np.abs(w2.w - w)),
                        max(np.max(np.abs(a - b)) for a, b in zip(x, x2)))
        assert worst < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
    def test_kingman_round_trip(self, H, N, seed):
        """Ordered frequencies with tails survive composing and decomposing."""
        rng = np.random.default_rng(seed)
        w = rng.dirichlet(np.ones(H))
        x = []
        for _ in range(H):
            weights = rng.dirichlet(np.ones(N + 1))
            x.append(OrderedMassVector(sorted_desc(weights[:N]), weights[N]))
        w2, x2 = decompose_S(compose_S(w, x))
        assert np.max(np.abs(w2.w - w)) < 1e-12
        for a, b in zip(x, x2):
            assert np.max(np.abs(a.atoms - b.atoms)) < 1e-12
            assert abs(a.tail - b.tail) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.randoms())
    def test_rank_idempotent_and_permutation_invariant(self, raw, random):
        """rank agrees with a descending sort, ignores order and fixes ranked input."""
        total = math.fsum(raw)
        x = np.array(raw) / total if total > 0 else np.array(raw)
        ranked = rank(x)
        assert ranked.atoms.tolist() == sorted_desc(x).tolist()
        shuffled = list(x)
        random.shuffle(shuffled)
        assert rank(shuffled).atoms.tolist() == ranked.atoms.tolist()
        assert rank(ranked.atoms).atoms.tolist() == ranked.atoms.tolist()
        assert rank(ranked) is ranked


class TestKingman:

    def test_ordered_mass_vector_invalid(self):
        with pytest.raises(ValueError):
            OrderedMassVector([0.2, 0.5])

    def test_power_sums_ignore_tail(self):
        """Order one includes the tail, higher orders only the atoms."""
        x = OrderedMassVector([0.5, 0.25], tail=0.25)
        assert x.power_sum(1) == approx(1.0)
        assert x.power_sum(2) == approx(0.3125)

    def test_lumped(self):
        """Lumping keeps K atoms and moves the remaining mass to the largest one."""
        z = KingmanPoint([OrderedMassVector([0.3, 0.1, 0.05], 0.05),
                          OrderedMassVector([0.4, 0.1])])
        blocks = z.lumped(2).blocks()
        assert blocks[0] == approx([0.4, 0.1])
        assert blocks[1] == approx([0.4, 0.1])

    def test_from_arrays(self):
        """Rows are ranked and tails count in the mark masses."""
        z = KingmanPoint.from_arrays([[0.1, 0.3], [0.2, 0.2]], [0.1, 0.1])
        assert z[0].atoms == approx([0.3, 0.1])
        assert z.masses == approx([0.5, 0.5])

    def test_rank_blocks(self):
        z = FlatSimplexPoint([0.1, 0.3, 0.4, 0.2], 2, 2)
        ranked = rank_blocks(z)
        assert ranked[0].atoms == approx([0.3, 0.1])
        assert ranked[1].atoms == approx([0.4, 0.2])

    def test_rank_negative(self):
        with pytest.raises(ValueError):
            rank([0.5, -0.1])


class TestBoundarySequence:

    @pytest.mark.parametrize('n', [1, 2, 7, 40, 41, 120])
    def test_interior(self, n):
        """Every member lies in the interior with total mass one."""
        z, (w, x) = boundary_sequence(n)
        assert z.is_interior()
        assert math.fsum(w.w) == approx(1.0)
        assert [vector.mass for vector in x] == approx([1.0, 1.0])

    @pytest.mark.parametrize('n, parity, w', [(200, 'even', [0.5, 0.5]),
                                              (199, 'odd', [0.25, 0.75])])
    def test_masses_match_limit(self, n, parity, w):
        """Mark masses equal the limit masses of their parity for every n."""
        _, (masses, _) = boundary_sequence(n)
        assert masses.w == approx(w, abs=1e-12)
        assert boundary_limit_points()[parity][0].w == approx(w)

    def test_offset_removed(self):
        """After removing the 1/(2n) offset the even decomposition is the even limit."""
        n, depth = 100, 40
        _, (_, x) = boundary_sequence(n, depth)
        limit_x = boundary_limit_points(depth)['even'][1]
        assert x[0].atoms - 1 / (2 * n) == approx(limit_x[0].atoms, abs=2.0 ** -depth)
        assert x[1].atoms == approx(limit_x[1].atoms, abs=2.0 ** -depth)

    def test_limits_differ(self):
        limits = boundary_limit_points()
        assert not np.allclose(limits['even'][0].w, limits['odd'][0].w)

    @pytest.mark.parametrize('parity, tails', [('even', [0.5, 0.0]), ('odd', [0.0, 1 / 3])])
    def test_escaped_mass_in_tails(self, parity, tails):
        """Mass that leaves every atom in the limit is kept as tail."""
        depth = 30
        _, x = boundary_limit_points(depth)[parity]
        assert [vector.tail for vector in x] == approx(tails, abs=2.0 ** -(depth - 1))
        assert [vector.mass for vector in x] == approx([1.0, 1.0])
        assert math.fsum(x[0].atoms) + math.fsum(x[1].atoms) < 2 - 0.3
