import numpy as np
import pytest

from msparisi.admissible import AdmissiblePair, DiscreteMeasure, SyncMap, identity_map
from msparisi.model import make_model


def xi_bruteforce(model, q, lam=None):
    """Independent oracle: enumerate every index tuple of every term."""
    lam = model.lam if lam is None else np.asarray(lam, dtype=float)
    q = np.asarray(q, dtype=float)
    total = 0.0
    for term in model.terms:
        for idx, val in term.entries():
            prod = val
            for i in idx:
                prod *= lam[i] * q[i]
            total += term.beta ** 2 * prod
    return total


def xi_s_bruteforce(model, s, q):
    """sum_p p beta^2 sum_{t_vec} Delta[(t_vec, s)] prod lam q over the first p-1 slots."""
    q = np.asarray(q, dtype=float)
    total = 0.0
    for term in model.terms:
        for idx, val in term.entries():
            if idx[-1] != s:
                continue
            prod = val
            for i in idx[:-1]:
                prod *= model.lam[i] * q[i]
            total += term.p * term.beta ** 2 * prod
    return total


def theta_bruteforce(model, q):
    q = np.asarray(q, dtype=float)
    total = 0.0
    for term in model.terms:
        for idx, val in term.entries():
            prod = val
            for i in idx:
                prod *= model.lam[i] * q[i]
            total += (term.p - 1) * term.beta ** 2 * prod
    return total


@pytest.fixture
def zero_model():
    return make_model(["a"], [1.0], [])


@pytest.fixture
def single_p2():
    """xi(q) = q^2."""
    return make_model(["a"], [1.0], [(2, 1.0, 1.0)])


def single_p2_beta(beta):
    return make_model(["a"], [1.0], [(2, beta, 1.0)])


@pytest.fixture
def two_species_all_ones():
    """lam = (1/2, 1/2), all tensor entries 1, p = 2, beta = 1."""
    return make_model(["a", "b"], [0.5, 0.5], [(2, 1.0, 1.0)])


@pytest.fixture
def bipartite():
    """Off-diagonal-only coupling: xi(q) = q_a q_b / 2; not convex."""
    return make_model(["a", "b"], [0.5, 0.5],
                      [(2, 1.0, {("a", "b"): 1.0, ("b", "a"): 1.0})])


def extremal_two_species_map():
    """Phi_a(q) = min(2q, 1), Phi_b(q) = max(0, 2q - 1) for lam = (1/2, 1/2)."""
    return SyncMap(knots=[0.0, 0.5, 1.0], values=[[0.0, 1.0, 1.0], [0.0, 0.0, 1.0]])


def delta0_pair(n_species=1):
    return AdmissiblePair(measure=DiscreteMeasure(m=[0.0, 1.0], q=[0.0]),
                          map=identity_map(n_species))


def random_measure(rng, k):
    m = np.concatenate([[0.0], np.sort(rng.random(k - 1)), [1.0]]) if k > 1 \
        else np.array([0.0, 1.0])
    while np.any(np.diff(m) <= 1e-9):
        m = np.concatenate([[0.0], np.sort(rng.random(k - 1)), [1.0]])
    q = np.sort(rng.random(k))
    return DiscreteMeasure(m=m, q=q)


def random_sync_map(rng, lam, knot_qs):
    """Random admissible map with knots at the given interior points."""
    lam = np.asarray(lam, dtype=float)
    S = len(lam)
    if S == 1:
        return identity_map(1)
    knots = np.unique(np.concatenate([[0.0, 1.0], knot_qs]))
    vals = np.zeros((S, len(knots)))
    prev = np.zeros(S)
    for i in range(1, len(knots)):
        dq = knots[i] - knots[i - 1]
        y = rng.dirichlet(np.ones(S))
        v = prev + dq * y / lam
        # cap at 1, push the clipped mass onto species with slack
        excess = float(np.sum(lam * np.maximum(v - 1.0, 0.0)))
        v = np.minimum(v, 1.0)
        if excess > 0:
            slack = float(np.sum(lam * (1.0 - v)))
            if slack > 0:
                v = np.minimum(v + excess * (1.0 - v) / slack, 1.0)
        vals[:, i] = v
        prev = v
    vals[:, -1] = 1.0
    return SyncMap(knots=knots, values=vals)


def random_pair(rng, lam, k):
    meas = random_measure(rng, k)
    sync = random_sync_map(rng, lam, meas.q)
    return AdmissiblePair(measure=meas, map=sync)
