import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import theta_bruteforce, xi_bruteforce, xi_s_bruteforce
from msparisi.errors import ValidationError
from msparisi.model import (SpeciesCounts, c_star, check_convexity,
                            make_model, theta, validate_model, xi,
                            xi_derivatives, xi_finite_n, xi_s, xi_s_all)


class TestValidate:
    def test_zero_term_model_valid(self, zero_model):
        assert validate_model(zero_model) == []

    def test_weights_must_sum_to_one(self):
        m = make_model(["a", "b"], [0.6, 0.5], [])
        problems = validate_model(m)
        assert any("sum" in p for p in problems)

    def test_asymmetric_tensor_reported(self):
        m = make_model(["a", "b"], [0.5, 0.5], [(2, 1.0, {("a", "b"): 1.0})])
        problems = validate_model(m)
        assert any("not symmetric" in p for p in problems)

    def test_negative_entry_reported(self):
        m = make_model(["a"], [1.0], [(2, 1.0, -1.0)])
        assert any("negative" in p for p in validate_model(m))

    def test_epsilon_witness(self):
        m = make_model(["a"], [1.0], [], epsilon_decay=0.0)
        assert any("epsilon" in p for p in validate_model(m))

    def test_sparse_storage_above_p4(self):
        m = make_model(["a"], [1.0], [(5, 0.5, {("a",) * 5: 2.0})])
        assert not m.terms[0].dense()
        assert validate_model(m) == []
        assert xi(m, [1.0]) == pytest.approx(0.25 * 2.0)


class TestXi:
    def test_zero_model(self, zero_model):
        assert xi(zero_model, [0.3]) == 0.0

    def test_single_species_square(self, single_p2):
        # xi(q) = q^2 by symbolic expansion
        assert xi(single_p2, [0.5]) == pytest.approx(0.25, abs=1e-15)
        assert xi(single_p2, [0.5]) == pytest.approx(
            xi_bruteforce(single_p2, [0.5]), abs=1e-15)

    def test_two_species_all_ones(self, two_species_all_ones):
        got = xi(two_species_all_ones, [1.0, 1.0])
        assert got == pytest.approx(1.0, abs=1e-15)
        assert got == pytest.approx(
            xi_bruteforce(two_species_all_ones, [1.0, 1.0]), abs=1e-15)

    def test_domain_error(self, single_p2):
        with pytest.raises(ValidationError):
            xi(single_p2, [1.5])

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_matches_bruteforce_two_species(self, qa, qb):
        m = make_model(["a", "b"], [0.3, 0.7],
                       [(1, 0.5, 1.0), (2, 1.0, 1.0), (3, 0.4, 1.0)])
        assert xi(m, [qa, qb]) == pytest.approx(
            xi_bruteforce(m, [qa, qb]), abs=1e-12)


class TestXiFiniteN:
    def test_exact_proportions(self, two_species_all_ones):
        counts = SpeciesCounts([8, 8])
        q = [0.4, 0.9]
        assert xi_finite_n(two_species_all_ones, counts, q) == pytest.approx(
            xi(two_species_all_ones, q), abs=1e-15)

    def test_single_species_any_counts(self, single_p2):
        assert xi_finite_n(single_p2, SpeciesCounts([7]), [0.5]) == pytest.approx(
            xi(single_p2, [0.5]))

    def test_three_one_split(self, two_species_all_ones):
        counts = SpeciesCounts([3, 1])
        assert xi_finite_n(two_species_all_ones, counts, [1.0, 1.0]) == pytest.approx(1.0)
        got = xi_finite_n(two_species_all_ones, counts, [1.0, 0.0])
        assert got == pytest.approx(0.5625, abs=1e-15)
        assert got == pytest.approx(
            xi_bruteforce(two_species_all_ones, [1.0, 0.0], lam=[0.75, 0.25]))

    def test_converges_to_xi(self, two_species_all_ones):
        lam = two_species_all_ones.lam
        q = [0.7, 0.3]
        errs = []
        for k in (10, 100, 1000):
            counts = SpeciesCounts(np.maximum(np.round(lam * 2 * k).astype(int), 1))
            errs.append(abs(xi_finite_n(two_species_all_ones, counts, q)
                            - xi(two_species_all_ones, q)))
        assert errs[-1] <= errs[0] + 1e-12
        assert errs[-1] < 1e-3


class TestXiS:
    def test_zero_model(self, zero_model):
        assert xi_s(zero_model, "a", [0.5]) == 0.0

    def test_single_species_derivative(self, single_p2):
        assert xi_s(single_p2, "a", [1.0]) == pytest.approx(2.0)

    def test_two_species(self, two_species_all_ones):
        got = xi_s(two_species_all_ones, "a", [1.0, 1.0])
        assert got == pytest.approx(2.0)
        assert got == pytest.approx(
            xi_s_bruteforce(two_species_all_ones, 0, [1.0, 1.0]))

    def test_unknown_species(self, single_p2):
        with pytest.raises(ValidationError):
            xi_s(single_p2, "zz", [0.5])

    def test_is_scaled_gradient(self, two_species_all_ones):
        q = np.array([0.3, 0.8])
        grad, _ = xi_derivatives(two_species_all_ones, q)
        np.testing.assert_allclose(
            grad, two_species_all_ones.lam * xi_s_all(two_species_all_ones, q),
            atol=1e-14)


class TestZeroOverlap:
    def test_p1_field_term_at_origin(self):
        # xi vanishes at 0 (every monomial has degree >= 1) while xi_s picks
        # up the degree-1 coefficient
        m = make_model(["a"], [1.0], [(1, 2.0, 1.0), (2, 1.0, 1.0)])
        assert xi(m, [0.0]) == 0.0
        assert xi_s(m, "a", [0.0]) == pytest.approx(4.0)  # p beta^2 = 1 * 4

    def test_no_p1_all_vanish(self, single_p2):
        assert xi(single_p2, [0.0]) == 0.0
        assert xi_s(single_p2, "a", [0.0]) == 0.0


class TestTheta:
    def test_pure_p1_vanishes(self):
        m = make_model(["a"], [1.0], [(1, 2.0, 1.0)])
        assert theta(m, [0.7]) == 0.0

    def test_single_species(self, single_p2):
        assert theta(single_p2, [1.0]) == pytest.approx(1.0)

    def test_two_species(self, two_species_all_ones):
        got = theta(two_species_all_ones, [1.0, 1.0])
        assert got == pytest.approx(1.0)
        assert got == pytest.approx(
            theta_bruteforce(two_species_all_ones, [1.0, 1.0]))

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=100, deadline=None)
    def test_identity_theta(self, qa, qb):
        # theta(q) = sum_s lam^s q^s xi_s(q) - xi(q), an algebraic identity
        m = make_model(["a", "b"], [0.4, 0.6],
                       [(1, 0.3, 1.0), (2, 0.8, 1.0), (3, 0.5, 1.0)])
        q = np.array([qa, qb])
        lhs = theta(m, q)
        rhs = float(np.sum(m.lam * q * xi_s_all(m, q))) - xi(m, q)
        assert lhs == pytest.approx(rhs, abs=1e-12)


class TestDerivatives:
    def test_zero_model(self, zero_model):
        grad, hess = xi_derivatives(zero_model, [0.5])
        assert grad == pytest.approx(0.0)
        assert hess == pytest.approx(0.0)

    def test_single_species_hessian(self, single_p2):
        _, hess = xi_derivatives(single_p2, [0.3])
        assert hess[0, 0] == pytest.approx(2.0)

    def test_bipartite_hessian(self, bipartite):
        _, hess = xi_derivatives(bipartite, [0.5, 0.5])
        np.testing.assert_allclose(hess, [[0.0, 0.5], [0.5, 0.0]], atol=1e-15)

    def test_gradient_matches_finite_differences(self, two_species_all_ones):
        m = make_model(["a", "b"], [0.4, 0.6],
                       [(2, 0.7, 1.0), (3, 0.5, 1.0)])
        rng = np.random.default_rng(0)
        for _ in range(10):
            q = rng.random(2) * 0.9
            grad, hess = xi_derivatives(m, q)
            step = 1e-5
            for i in range(2):
                e = np.zeros(2)
                e[i] = step
                fd = (xi(m, q + e) - xi(m, q - e)) / (2 * step)
                assert grad[i] == pytest.approx(fd, rel=1e-6)
                gp, _ = xi_derivatives(m, q + e)
                gm, _ = xi_derivatives(m, q - e)
                np.testing.assert_allclose(hess[:, i], (gp - gm) / (2 * step),
                                           rtol=1e-5, atol=1e-8)


class TestMonotone:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_coordinatewise_nondecreasing(self, seed):
        m = make_model(["a", "b"], [0.5, 0.5],
                       [(1, 0.2, 1.0), (2, 1.0, 1.0), (4, 0.3, 1.0)])
        rng = np.random.default_rng(seed)
        lo = rng.random(2)
        hi = lo + (1.0 - lo) * rng.random(2)
        assert xi(m, hi) >= xi(m, lo) - 1e-12
        assert theta(m, hi) >= theta(m, lo) - 1e-12
        assert np.all(xi_s_all(m, hi) >= xi_s_all(m, lo) - 1e-12)


class TestConvexity:
    def test_single_species_convex(self, single_p2):
        assert check_convexity(single_p2).ok

    def test_all_ones_convex(self, two_species_all_ones):
        # rank-one Hessian, outer product of the weights
        assert check_convexity(two_species_all_ones).ok

    def test_bipartite_not_convex(self, bipartite):
        report = check_convexity(bipartite)
        assert not report.ok
        assert report.min_eigenvalue == pytest.approx(-0.5, abs=1e-9)


class TestCStar:
    def test_zero_model(self, zero_model):
        assert c_star(zero_model) == 0.0

    def test_single_species(self, single_p2):
        assert c_star(single_p2) == pytest.approx(2.0)

    def test_two_species(self, two_species_all_ones):
        assert c_star(two_species_all_ones) == pytest.approx(1.0)


class TestSpeciesCounts:
    def test_rejects_zero(self):
        with pytest.raises(ValidationError):
            SpeciesCounts([4, 0])

    def test_proportions(self):
        c = SpeciesCounts([3, 1])
        assert c.total == 4
        np.testing.assert_allclose(c.lam_n, [0.75, 0.25])
