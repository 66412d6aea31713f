import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (delta0_pair, extremal_two_species_map, random_measure,
                      random_pair)
from msparisi.admissible import (AdmissiblePair, DiscreteMeasure, SyncMap,
                                 dirac, discretize_measure, identity_map,
                                 lipschitz_sum, mutual_refine, pseudometric_d,
                                 pushforward, pushforwards_equal, quantile,
                                 validate_pair)
from msparisi.errors import ValidationError

HALF = np.array([0.5, 0.5])


def pl_eval(knots, vals, x):
    return np.interp(x, knots, vals)


class TestValidatePair:
    def test_identity_single_species(self):
        pair = AdmissiblePair(measure=dirac(0.3), map=identity_map(1))
        assert validate_pair([1.0], pair) == []

    def test_extremal_map_valid(self):
        pair = AdmissiblePair(measure=dirac(0.5), map=extremal_two_species_map())
        assert validate_pair(HALF, pair) == []

    def test_joint_constraint_violation(self):
        sync = SyncMap(knots=[0.0, 0.5, 1.0],
                       values=[[0.0, 0.6, 1.0], [0.0, 0.6, 1.0]])
        pair = AdmissiblePair(measure=dirac(0.5), map=sync)
        problems = validate_pair(HALF, pair)
        assert any("joint constraint" in p and "0.5" in p for p in problems)

    def test_bad_measure(self):
        meas = DiscreteMeasure(m=[0.0, 0.4, 0.4, 1.0], q=[0.1, 0.2, 0.3])
        pair = AdmissiblePair(measure=meas, map=identity_map(1))
        assert any("strictly increasing" in p for p in validate_pair([1.0], pair))


class TestQuantile:
    def test_dirac_at_zero(self):
        for z in (0.0, 0.3, 1.0):
            assert quantile(dirac(0.0), z) == 0.0

    def test_two_atoms(self):
        meas = DiscreteMeasure(m=[0.0, 0.3, 1.0], q=[0.2, 0.9])
        assert quantile(meas, 0.3) == pytest.approx(0.2)
        assert quantile(meas, 0.31) == pytest.approx(0.9)
        assert quantile(meas, 1.0) == pytest.approx(0.9)

    def test_single_atom(self):
        meas = dirac(0.7)
        assert quantile(meas, 1e-9) == pytest.approx(0.7)
        assert quantile(meas, 1.0) == pytest.approx(0.7)

    def test_domain(self):
        with pytest.raises(ValidationError):
            quantile(dirac(0.5), 1.2)


class TestPseudometric:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(0)
        pair = random_pair(rng, HALF, 3)
        assert pseudometric_d(HALF, pair, pair) == 0.0

    def test_two_diracs(self):
        p1 = AdmissiblePair(measure=dirac(0.2), map=identity_map(1))
        p2 = AdmissiblePair(measure=dirac(0.9), map=identity_map(1))
        assert pseudometric_d([1.0], p1, p2) == pytest.approx(0.7)

    def test_identity_vs_extremal(self):
        same = dirac(0.5)
        p1 = AdmissiblePair(measure=same, map=identity_map(2))
        p2 = AdmissiblePair(measure=same, map=extremal_two_species_map())
        # single atom: ||(0.5, 0.5) - (1, 0)||_1 = 1
        assert pseudometric_d(HALF, p1, p2) == pytest.approx(1.0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_axioms(self, seed):
        rng = np.random.default_rng(seed)
        pairs = [random_pair(rng, HALF, int(rng.integers(1, 4))) for _ in range(3)]
        d01 = pseudometric_d(HALF, pairs[0], pairs[1])
        d10 = pseudometric_d(HALF, pairs[1], pairs[0])
        d02 = pseudometric_d(HALF, pairs[0], pairs[2])
        d12 = pseudometric_d(HALF, pairs[1], pairs[2])
        assert d01 == pytest.approx(d10, abs=1e-12)
        assert d01 >= 0.0
        assert d02 <= d01 + d12 + 1e-12

    def test_matches_z_grid_riemann(self):
        # Riemann-sum oracle over a fine z grid
        rng = np.random.default_rng(7)
        p1 = random_pair(rng, HALF, 3)
        p2 = random_pair(rng, HALF, 2)
        z = (np.arange(200_000) + 0.5) / 200_000
        v1 = p1.map(np.asarray(quantile(p1.measure, z)))
        v2 = p2.map(np.asarray(quantile(p2.measure, z)))
        riemann = np.abs(v1 - v2).sum(axis=0).mean()
        assert pseudometric_d(HALF, p1, p2) == pytest.approx(riemann, abs=1e-4)


class TestPushforward:
    def test_dirac_zero(self):
        atoms, masses = pushforward(delta0_pair(2))
        np.testing.assert_allclose(atoms, [[0.0, 0.0]])
        np.testing.assert_allclose(masses, [1.0])

    def test_identity(self):
        meas = DiscreteMeasure(m=[0.0, 0.3, 1.0], q=[0.2, 0.9])
        atoms, masses = pushforward(AdmissiblePair(measure=meas, map=identity_map(1)))
        np.testing.assert_allclose(atoms[:, 0], [0.2, 0.9])
        np.testing.assert_allclose(masses, [0.3, 0.7])

    def test_extremal(self):
        pair = AdmissiblePair(measure=dirac(0.5), map=extremal_two_species_map())
        atoms, masses = pushforward(pair)
        np.testing.assert_allclose(atoms, [[1.0, 0.0]])
        np.testing.assert_allclose(masses, [1.0])

    def test_wasserstein_equivalence(self):
        # D equals the comonotone-coupling W1 between pushforwards: check
        # against a direct W1 computation for single species where the
        # comonotone coupling is optimal
        rng = np.random.default_rng(3)
        p1 = random_pair(rng, [1.0], 3)
        p2 = random_pair(rng, [1.0], 2)
        z = np.union1d(p1.measure.m, p2.measure.m)
        w1 = sum((z[i + 1] - z[i])
                 * abs(quantile(p1.measure, z[i + 1]) - quantile(p2.measure, z[i + 1]))
                 for i in range(len(z) - 1))
        assert pseudometric_d([1.0], p1, p2) == pytest.approx(w1, abs=1e-12)


class TestMutualRefine:
    def test_self_refine(self):
        meas = DiscreteMeasure(m=[0.0, 0.4, 1.0], q=[0.1, 0.6])
        r1, r2 = mutual_refine(meas, meas)
        np.testing.assert_allclose(r1.m, meas.m)
        np.testing.assert_allclose(r1.q, meas.q)
        np.testing.assert_allclose(r2.q, meas.q)

    def test_grid_union_and_duplication(self):
        m1 = DiscreteMeasure(m=[0.0, 1.0], q=[0.4])
        m2 = DiscreteMeasure(m=[0.0, 0.5, 1.0], q=[0.1, 0.7])
        r1, r2 = mutual_refine(m1, m2)
        np.testing.assert_allclose(r1.m, [0.0, 0.5, 1.0])
        np.testing.assert_allclose(r1.q, [0.4, 0.4])
        np.testing.assert_allclose(r2.q, [0.1, 0.7])

    def test_pseudometric_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            pa = random_pair(rng, HALF, int(rng.integers(1, 4)))
            pb = random_pair(rng, HALF, int(rng.integers(1, 4)))
            d0 = pseudometric_d(HALF, pa, pb)
            ra, rb = mutual_refine(pa.measure, pb.measure)
            pa2 = AdmissiblePair(measure=ra, map=pa.map)
            pb2 = AdmissiblePair(measure=rb, map=pb.map)
            assert pseudometric_d(HALF, pa2, pb2) == pytest.approx(d0, abs=1e-12)
            # equal-pushforward distinct representations are at distance 0
            assert pseudometric_d(HALF, pa, pa2) == pytest.approx(0.0, abs=1e-12)
            assert pushforwards_equal(pa, pa2)

    def test_zero_distance_iff_equal_pushforwards(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            pa = random_pair(rng, HALF, int(rng.integers(1, 4)))
            pb = random_pair(rng, HALF, int(rng.integers(1, 4)))
            d = pseudometric_d(HALF, pa, pb)
            assert (d <= 1e-12) == pushforwards_equal(pa, pb), d


class TestDiscretize:
    def test_atom_on_grid(self):
        meas = discretize_measure(lambda z: np.asarray(quantile(dirac(0.5), z)), 10)
        np.testing.assert_allclose(meas.q, [0.5])
        np.testing.assert_allclose(meas.m, [0.0, 1.0])

    def test_uniform(self):
        meas = discretize_measure(lambda z: z, 4)
        np.testing.assert_allclose(meas.q, [0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(meas.masses, [0.25] * 4, atol=1e-12)

    def test_off_grid_atom_snaps_up(self):
        meas = discretize_measure(lambda z: np.asarray(quantile(dirac(0.33), z)), 10)
        np.testing.assert_allclose(meas.q, [0.4])

    def test_rejects_decreasing_oracle(self):
        with pytest.raises(ValidationError):
            discretize_measure(lambda z: 1.0 - np.asarray(z), 4)

    def test_distance_bound(self):
        # D((zeta, Phi), (zeta_K, Phi)) <= (1/K) sum_s 1/lam^s
        rng = np.random.default_rng(5)
        for K in (4, 16, 64):
            pair = random_pair(rng, HALF, 3)
            oracle = lambda z: np.asarray(quantile(pair.measure, z))
            snapped = discretize_measure(oracle, K)
            p2 = AdmissiblePair(measure=snapped, map=pair.map)
            bound = lipschitz_sum(HALF) / K
            assert pseudometric_d(HALF, pair, p2) <= bound + 1e-10


def ibp_lhs(meas, f_knots, f_vals):
    """int zeta([0,u]) f'(u) du, exact: piecewise-constant cdf times the
    piecewise-linear slope, summed over the merged breakpoint grid."""
    brk = np.unique(np.concatenate([f_knots, meas.q, [0.0, 1.0]]))
    total = 0.0
    for a, b in zip(brk[:-1], brk[1:]):
        mid = 0.5 * (a + b)
        cdf = float(meas.cdf(mid))
        df = np.interp(b, f_knots, f_vals) - np.interp(a, f_knots, f_vals)
        total += cdf * df
    return total


def ibp_rhs(meas, f_knots, f_vals):
    """f(1) - int f(Q(z)) dz, exact: Q is constant on each mass interval."""
    fq = np.interp(meas.q, f_knots, f_vals)
    return np.interp(1.0, f_knots, f_vals) - float(np.sum(meas.masses * fq))


def random_pl_function(rng, nondecreasing=True, allow_flat=True):
    """Random piecewise-linear f on [0,1] with f(0) = 0; returns (knots, values)."""
    f_knots = np.unique(np.concatenate([[0.0, 1.0], rng.random(3)]))
    slopes = rng.random(len(f_knots) - 1) * 2.0
    if allow_flat and rng.random() < 0.3:
        slopes[rng.integers(0, len(slopes))] = 0.0  # flat piece collapses atoms
    f_vals = np.concatenate([[0.0], np.cumsum(slopes * np.diff(f_knots))])
    return f_knots, f_vals


def quantile_unnormalized(meas, z):
    """Quantile for measures whose atoms may exceed 1 (pushforward under f)."""
    idx = np.searchsorted(meas.m[1:], z, side="left")
    return meas.q[min(idx, meas.k - 1)] if z > 0 else 0.0


def commutation_max_gap(meas, f_knots, f_vals, rng):
    """max |f(Q_zeta(z)) - Q_{zeta o f^{-1}}(z)| over jump points and random z."""
    pushed = DiscreteMeasure(m=meas.m, q=np.interp(meas.q, f_knots, f_vals))
    zs = np.concatenate([meas.m[1:], rng.random(100)])
    zs = zs[zs > 0]
    worst = 0.0
    for z in zs:
        lhs = np.interp(quantile(meas, z), f_knots, f_vals)
        rhs = quantile_unnormalized(pushed, z)
        worst = max(worst, abs(lhs - rhs))
    return worst


class TestQuantileIdentities:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_integration_by_parts(self, seed):
        # int_0^1 zeta([0,u]) f'(u) du = f(1) - int_0^1 f(Q(z)) dz
        rng = np.random.default_rng(seed)
        meas = random_measure(rng, int(rng.integers(1, 5)))
        f_knots, f_vals = random_pl_function(rng, allow_flat=False)
        assert ibp_lhs(meas, f_knots, f_vals) == pytest.approx(
            ibp_rhs(meas, f_knots, f_vals), abs=1e-10)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_pushforward_quantile_commutation(self, seed):
        # f(Q_zeta(z)) = Q_{zeta o f^{-1}}(z) for nondecreasing continuous
        # piecewise-linear f with f(0) = 0
        rng = np.random.default_rng(seed)
        meas = random_measure(rng, int(rng.integers(1, 5)))
        f_knots, f_vals = random_pl_function(rng)
        assert commutation_max_gap(meas, f_knots, f_vals, rng) <= 1e-12


class TestLipschitzBound:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_map_l1_lipschitz(self, seed):
        rng = np.random.default_rng(seed)
        lam = rng.dirichlet([2.0, 2.0, 2.0])
        lam = lam / lam.sum()
        pair = random_pair(rng, lam, 3)
        x, y = rng.random(2)
        gap = np.abs(pair.map(x) - pair.map(y)).sum()
        assert gap <= abs(x - y) * lipschitz_sum(lam) + 1e-9
