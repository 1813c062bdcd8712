"""
Testing of the test-function algebra and the generators acting on it.
"""
import numpy as np
import pytest
from pytest import approx

from multipd.generators import (Combination, GeneratorKind, PowerSums, Tag, TestFunction,
                                apply_A0, apply_AhK, apply_B, apply_Bh, apply_Bhat, apply_BK,
                                apply_generator, apply_generator_coordinates,
                                check_convergence_bound, check_intertwining, convergence_bound,
                                decompose_B, domain_family, eval_AK, family_from_json,
                                family_to_json, finite_difference_oracle, gradient, hessian,
                                interaction, intertwining_deviations, mass_correction)
from multipd.polynomial import Polynomial, monomial_exponents
from multipd.samplers import SeedSpec, sample_dirichlet
from multipd.simplex import (DomainError, FlatSimplexPoint, KingmanPoint, OrderedMassVector,
                             Tolerances, compose_S)

THETA = [2.0, 3.0]


@pytest.fixture
def flat_point():
    return FlatSimplexPoint([0.1, 0.2, 0.05, 0.15, 0.3, 0.2], 2, 3)


@pytest.fixture
def reset_tolerances():
    yield
    Tolerances.reset_default_attribute_values()


class TestTestFunction:

    def test_normal_form(self):
        """Orders equal to one are dropped and the rest sorted."""
        f = TestFunction((0, 1), ((1, 2, 3), ()))
        assert f.mvecs == ((3, 2), ())
        assert f == TestFunction((0, 1), ((2, 3), ()))
        assert hash(f) == hash(TestFunction((0, 1), ((2, 3), ())))

    @pytest.mark.parametrize('m0, mvecs', [((), ()), ((0,), ((), ())), ((0,), ((0,),))])
    def test_invalid(self, m0, mvecs):
        with pytest.raises(ValueError):
            TestFunction(m0, mvecs)

    def test_str(self):
        assert str(TestFunction.power_sums(2, 0, 2, m0=1)) == '|z1|^1 phi2(z1)'
        assert str(TestFunction.constant(3)) == '1'

    def test_product(self):
        f = TestFunction.mark_power(2, 0) * TestFunction.power_sums(2, 1, 2)
        assert f == TestFunction((1, 0), ((), (2,)))
        assert f.w_exponents == (1, 2)

    @pytest.mark.parametrize('f, inside', [(TestFunction((-1,), ((2,),)), True),
                                           (TestFunction((-2,), ((2,),)), False),
                                           (TestFunction((-1,), ((),)), False),
                                           (TestFunction((-2,), ((3,),)), True),
                                           (TestFunction((0, 1), ((2,), ())), True)])
    def test_domain(self, f, inside):
        """Marks with power sums allow m0 >= 1 - sum of orders, bare marks m0 >= 0."""
        assert f.in_domain() is inside

    def test_values(self, flat_point):
        f = TestFunction.power_sums(2, 0, 2, m0=1)
        blocks = flat_point.blocks()
        expected = blocks[0].sum() * np.sum(blocks[0] ** 2)
        assert f.evaluate(flat_point) == approx(expected)

    def test_tail_counts_in_mass_only(self):
        point = KingmanPoint([OrderedMassVector([0.25], 0.25), OrderedMassVector([0.5])])
        assert TestFunction.mark_power(2, 0).evaluate(point) == approx(0.5)
        assert TestFunction.power_sums(2, 0, 2).evaluate(point) == approx(0.0625)

    def test_batch_values(self):
        batch = np.array([[[0.5, 0.0], [0.25, 0.25]], [[0.1, 0.1], [0.4, 0.4]]])
        values = TestFunction.power_sums(2, 1, 2).values(batch)
        assert values == approx([0.125, 0.32])

    def test_floor(self, reset_tolerances):
        """Negative mass exponents are not evaluated below the mass floor."""
        f = TestFunction((-1, 0), ((2,), ()))
        point = np.array([[0.0, 0.0], [0.5, 0.5]])
        with pytest.raises(DomainError):
            f.values(point)
        assert np.isnan(f.values(point, on_floor='nan'))
        Tolerances.update_attributes({'mass_floor': 1e-3})
        with pytest.raises(DomainError):
            f.values(np.array([[1e-4, 0.0], [0.5, 0.4999]]))

    def test_json(self):
        family = [TestFunction.power_sums(2, 0, 2, 3, m0=-1), TestFunction.constant(2)]
        assert family_from_json(family_to_json(family)) == family

    def test_domain_family(self):
        family = domain_family(2)
        assert family
        assert all(f.in_domain() for f in family)
        assert TestFunction((-1, 1), ((2,), ())) in family


class TestCombination:

    def test_cancellation(self):
        f = TestFunction.mark_power(1, 0)
        comb = Combination.of(f, 2.0) - Combination.of(f, 2.0)
        assert len(comb) == 0
        assert comb.evaluate(np.array([[1.0]])) == 0.0

    def test_linear(self, flat_point):
        f, g = TestFunction.mark_power(2, 0), TestFunction.power_sums(2, 1, 2)
        comb = 3 * Combination.of(f) + Combination.of(g, -1.0)
        assert comb.coefficient(f) == 3.0
        assert comb.evaluate(flat_point) == approx(3 * f.evaluate(flat_point)
                                                   - g.evaluate(flat_point))


class TestSymbolicGenerators:

    @pytest.fixture(autouse=True)
    def create_point(self, flat_point):
        self.point = flat_point
        self.mass = flat_point.masses[0]
        self.phi2 = float(np.sum(flat_point.blocks()[0] ** 2))

    def test_B_mark_mass(self):
        """B|z_1| = theta_1 / 2 - theta_bar / 2 |z_1|."""
        value = apply_B(THETA, TestFunction.mark_power(2, 0)).evaluate(self.point)
        assert value == approx(1.0 - 2.5 * self.mass)

    def test_B_phi2(self):
        """B phi_2(z_1) = |z_1| - (1 + theta_bar) phi_2(z_1)."""
        value = apply_B(THETA, TestFunction.power_sums(2, 0, 2)).evaluate(self.point)
        assert value == approx(self.mass - 6.0 * self.phi2)

    def test_Bhat_lacks_correction(self):
        f = TestFunction.mark_power(2, 0)
        difference = apply_B(THETA, f) - apply_Bhat(THETA, f)
        assert difference.evaluate(self.point) == approx(mass_correction(THETA, f)
                                                         .evaluate(self.point))
        assert difference.evaluate(self.point) == approx(1.0)

    def test_BK_gradient_term(self):
        """B^K phi_2(z_1) - B phi_2(z_1) = theta_1 / K |z_1|."""
        f = TestFunction.power_sums(2, 0, 2)
        gap = apply_BK(THETA, 3, f) - apply_B(THETA, f)
        assert gap.evaluate(self.point) == approx(2.0 / 3 * self.mass)

    def test_BK_agrees_with_B_on_masses(self):
        f = TestFunction.mark_power(2, 1, 2)
        gap = apply_BK(THETA, 3, f) - apply_B(THETA, f)
        assert gap.evaluate(self.point) == approx(0.0, abs=1e-14)

    def test_outside_domain(self):
        with pytest.raises(DomainError):
            apply_B(THETA, TestFunction((-1, 0), ((), ())))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_B([1.0, 2.0, 3.0], TestFunction.constant(2))

    def test_interaction(self):
        f = TestFunction((1, 0), ((), (2,)))
        assert interaction(f).coefficient(f) == approx(2.0)

    def test_A0(self):
        """A0 w_1 at w = (1/2, 1/2) with theta = (2, 3)."""
        value = apply_A0(THETA, TestFunction.w_monomial((1, 0))).evaluate(
            PowerSums.of_masses([0.5, 0.5]))
        assert value == approx(-0.25)

    def test_A0_rejects_power_sums(self):
        with pytest.raises(DomainError):
            apply_A0(THETA, TestFunction.power_sums(2, 0, 2))

    def test_AhK_phi2(self):
        """A phi_2 = (1 + theta_h / K) - (1 + theta_h) phi_2 on frequency vectors."""
        theta_h, K = 2.0, 4
        x = np.array([0.1, 0.2, 0.3, 0.4])
        value = apply_AhK(theta_h, K, TestFunction((0,), ((2,),))).evaluate(x[None, :])
        phi2 = np.sum(x ** 2)
        assert value == approx(1 + theta_h / K - (1 + theta_h) * phi2)

    def test_AhK_requires_one_mark(self):
        with pytest.raises(DomainError):
            apply_AhK(2.0, 4, TestFunction.constant(2))


class TestDecomposition:

    @pytest.mark.parametrize('f', domain_family(2, mvecs=((), (2,), (2, 3)), m0_values=(-1, 0, 2)))
    def test_identity(self, f, flat_point):
        """The sum of per-mark parts minus the interaction is B."""
        result = decompose_B(THETA, f, flat_point)
        assert result.per_mark.sum() - result.interaction == approx(result.total)

    def test_decomposed_kind(self, flat_point):
        f = TestFunction((1, 1), ((2,), (3,)))
        decomposed = apply_generator(GeneratorKind('Bh_decomposed', THETA), f, flat_point)
        direct = apply_generator(GeneratorKind(Tag.B, THETA), f, flat_point)
        assert decomposed == approx(direct)

    def test_single_apply_Bh(self, flat_point):
        """Only the mark a function depends on contributes."""
        f = TestFunction.mark_power(2, 0)
        mass = flat_point.masses[0]
        assert apply_Bh(THETA, f, 0).evaluate(flat_point) == approx(1.0 - 2.5 * mass)
        assert len(apply_Bh(THETA, f, 1)) == 0


class TestIntertwining:

    def test_eval_AK_matches_BK(self):
        """A^K applied to f o S equals B^K f composed with S."""
        theta, K = THETA, 3
        w = np.array([0.3, 0.7])
        x = np.array([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])
        z = compose_S(w, list(x))
        for f in [TestFunction.power_sums(2, 0, 2), TestFunction((1, 0), ((2,), (3,))),
                  TestFunction.mark_power(2, 1, 2)]:
            lhs = apply_generator(GeneratorKind(Tag.AK, theta, K=K), f, (w, x))
            rhs = apply_generator(GeneratorKind(Tag.BK, theta, K=K), f, z)
            assert lhs == approx(rhs)

    def test_eval_AK_domain(self):
        with pytest.raises(DomainError):
            eval_AK(THETA, 2, TestFunction((-3, 0), ((2,), ())), [0.5, 0.5],
                    np.full((2, 2), 0.5))

    def test_monomial_deviations(self):
        """Every monomial of degree at most three intertwines."""
        K = 2
        points = sample_dirichlet(np.ones(4), SeedSpec(3), size=50)
        deviations = intertwining_deviations(THETA, K, monomial_exponents(4, 3), points)
        assert deviations.max() < 1e-10

    def test_polynomial(self):
        rng = np.random.default_rng(5)
        exponents = monomial_exponents(4, 3)
        f = Polynomial(exponents, rng.normal(size=exponents.shape[0]))
        points = sample_dirichlet(np.ones(4), SeedSpec(4), size=20)
        assert check_intertwining(THETA, 2, f, points) < 1e-10

    def test_boundary_points_rejected(self):
        points = np.array([[0.5, 0.5, 0.0, 0.0]])
        with pytest.raises(ValueError):
            intertwining_deviations(THETA, 2, monomial_exponents(4, 1), points)


class TestDerivatives:

    @pytest.mark.parametrize('f', [TestFunction((1, 0), ((2,), (3,))),
                                   TestFunction((-1, 2), ((2, 2), ())),
                                   TestFunction.power_sums(2, 1, 3, 2)])
    def test_closed_form_matches_oracle(self, f, flat_point):
        grad, hess = finite_difference_oracle(f, flat_point)
        assert gradient(f, flat_point) == approx(grad, rel=1e-5, abs=1e-8)
        assert hessian(f, flat_point) == approx(hess, rel=1e-4, abs=1e-6)

    def test_pair(self, flat_point):
        f = TestFunction((1, 0), ((2,), (3,)))
        first, second = finite_difference_oracle(f, flat_point, pair=((0, 1), (1, 2)))
        assert first == approx(gradient(f, flat_point)[0, 1], rel=1e-5)
        assert second == approx(hessian(f, flat_point)[0, 1, 1, 2], rel=1e-4)

    def test_oracle_near_boundary(self):
        point = FlatSimplexPoint([0.5, 0.0, 0.25, 0.25], 2, 2)
        with pytest.raises(DomainError):
            finite_difference_oracle(TestFunction.constant(2), point)

    @pytest.mark.parametrize('tag, K', [(Tag.B, None), (Tag.BHAT, None), (Tag.BK, 3)])
    def test_coordinate_route(self, tag, K, flat_point):
        """Generators from explicit derivatives agree with the symbolic algebra."""
        kind = GeneratorKind(tag, THETA, K=K)
        for f in [TestFunction((1, 0), ((2,), (3,))), TestFunction((-1, 1), ((2,), ()))]:
            assert apply_generator_coordinates(kind, f, flat_point) == \
                approx(apply_generator(kind, f, flat_point))


class TestConvergence:

    def test_bound(self):
        assert convergence_bound(THETA, TestFunction.power_sums(2, 0, 2), 8) == approx(0.5)

    def test_within_bound(self):
        f = TestFunction.power_sums(2, 0, 2)
        frame = check_convergence_bound(THETA, f, [2, 8, 32], 200, SeedSpec(6))
        assert list(frame.columns) == ['K', 'sup_deviation', 'bound', 'within_bound']
        assert frame['within_bound'].all()
        assert frame['sup_deviation'].is_monotonic_decreasing


class TestGeneratorKind:

    def test_requires_K(self):
        with pytest.raises(ValueError):
            GeneratorKind(Tag.BK, THETA)

    def test_requires_mark(self):
        with pytest.raises(ValueError):
            GeneratorKind(Tag.AHK, THETA, K=3)

    def test_BK_point_mismatch(self, flat_point):
        with pytest.raises(ValueError):
            apply_generator(GeneratorKind(Tag.BK, THETA, K=2), TestFunction.constant(2),
                            flat_point)

    def test_A0_kind(self):
        kind = GeneratorKind(Tag.A0, THETA)
        assert apply_generator(kind, TestFunction.w_monomial((1, 0)), [0.5, 0.5]) == \
            approx(-0.25)

    def test_AhK_kind(self):
        kind = GeneratorKind(Tag.AHK, THETA, K=2, mark=1)
        value = apply_generator(kind, TestFunction((0,), ((2,),)), [0.5, 0.5])
        assert value == approx(1 + 1.5 - 4.0 * 0.5)
