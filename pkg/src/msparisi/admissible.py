"""Admissible pairs: finitely supported overlap measures plus synchronization maps.

A DiscreteMeasure encodes ``zeta = sum_r (m_r - m_{r-1}) delta_{q_r}`` through
its cumulative masses ``0 = m_0 < ... < m_k = 1`` and nondecreasing atom
locations ``q_1 <= ... <= q_k`` in [0, 1].  Duplicate atoms are a legal
representation of the same measure; nothing here canonicalizes them away.

A SyncMap is a piecewise-linear map Phi: [0,1] -> [0,1]^S, nondecreasing per
species, whose lam-weighted average of coordinates is the identity.  Because
interpolation is linear and the joint constraint is linear, enforcing it at
the knots enforces it everywhere.

The distance between pairs is the Wasserstein-1 distance (l1 ground metric)
between the pushforwards zeta o Phi^{-1}, computed exactly through quantile
functions: the integrand is piecewise constant on the union of the two
cumulative-mass grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class DiscreteMeasure:
    m: np.ndarray  # (k+1,) cumulative masses, m[0] = 0, m[-1] = 1
    q: np.ndarray  # (k,) atom locations

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=np.float64))
        q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "q", q)
        if m.ndim != 1 or q.ndim != 1 or len(m) != len(q) + 1:
            raise ValidationError("measure needs len(m) == len(q) + 1")

    @property
    def k(self) -> int:
        return len(self.q)

    @property
    def masses(self) -> np.ndarray:
        return np.diff(self.m)

    def cdf(self, x) -> np.ndarray:
        """zeta([0, x]) evaluated pointwise."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(self.q, x, side="right")
        return self.m[idx]


def dirac(q0: float) -> DiscreteMeasure:
    return DiscreteMeasure(m=np.array([0.0, 1.0]), q=np.array([float(q0)]))


@dataclass(frozen=True)
class SyncMap:
    knots: np.ndarray   # (n,) strictly increasing, knots[0] = 0, knots[-1] = 1
    values: np.ndarray  # (S, n), values[s, i] = Phi^s(knots[i])

    def __post_init__(self):
        knots = np.atleast_1d(np.asarray(self.knots, dtype=np.float64))
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        if values.shape[1] != len(knots):
            raise ValidationError("values must have one column per knot")

    @property
    def n_species(self) -> int:
        return self.values.shape[0]

    def __call__(self, x) -> np.ndarray:
        """Evaluate Phi; returns shape (S,) for scalar x, (S, len(x)) otherwise."""
        x = np.asarray(x, dtype=np.float64)
        out = np.stack([np.interp(x, self.knots, self.values[s])
                        for s in range(self.n_species)])
        return out

    def slopes(self) -> np.ndarray:
        """Per-species slope on each knot interval, shape (S, n-1)."""
        dk = np.diff(self.knots)
        return np.diff(self.values, axis=1) / dk


def identity_map(n_species: int = 1) -> SyncMap:
    """Phi^s(q) = q for every species (admissible iff it has to be: S=1,
    but also valid for any lam since the weights sum to one)."""
    knots = np.array([0.0, 1.0])
    return SyncMap(knots=knots, values=np.tile(knots, (n_species, 1)))


@dataclass(frozen=True)
class AdmissiblePair:
    measure: DiscreteMeasure
    map: SyncMap


def validate_pair(lam, pair: AdmissiblePair) -> list[str]:
    """Return invariant violations for (measure, map) against weights lam."""
    lam = np.asarray(lam, dtype=np.float64)
    out = []
    m, q = pair.measure.m, pair.measure.q
    if abs(m[0]) > 0.0:
        out.append(f"m[0] = {m[0]:.6g} != 0")
    if abs(m[-1] - 1.0) > 1e-12:
        out.append(f"m[-1] = {m[-1]:.10g} != 1")
    if np.any(np.diff(m) <= 0):
        r = int(np.argmax(np.diff(m) <= 0))
        out.append(f"m not strictly increasing at index {r + 1}")
    if np.any(np.diff(q) < -1e-15):
        r = int(np.argmax(np.diff(q) < -1e-15))
        out.append(f"q decreasing at index {r + 1}")
    if np.any(q < -1e-15) or np.any(q > 1.0 + 1e-15):
        out.append("q locations must lie in [0, 1]")

    sync = pair.map
    if sync.n_species != len(lam):
        out.append(f"map has {sync.n_species} species, lam has {len(lam)}")
        return out
    knots, vals = sync.knots, sync.values
    if abs(knots[0]) > 0.0 or abs(knots[-1] - 1.0) > 1e-12:
        out.append("knots must start at 0 and end at 1")
    if np.any(np.diff(knots) <= 0):
        out.append("knots must be strictly increasing")
    if np.any(np.diff(vals, axis=1) < -1e-12):
        s = int(np.argmax(np.any(np.diff(vals, axis=1) < -1e-12, axis=1)))
        out.append(f"Phi^{s} is not nondecreasing")
    if np.any(vals < -1e-12) or np.any(vals > 1.0 + 1e-12):
        out.append("Phi values must lie in [0, 1]")
    joint = lam @ vals - knots
    bad = np.abs(joint) > 1e-12
    if np.any(bad):
        i = int(np.argmax(bad))
        out.append(f"joint constraint fails at knot {knots[i]:.6g} "
                   f"(sum lam Phi = {float((lam @ vals)[i]):.12g})")
    return out


def quantile(measure: DiscreteMeasure, z):
    """Generalized inverse inf{q >= 0 : zeta([0,q]) >= z}.

    Returns q_r for z in (m_{r-1}, m_r]; by the infimum convention the value
    at z = 0 is 0.  Accepts scalars or arrays.
    """
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr < 0.0) or np.any(z_arr > 1.0):
        raise ValidationError("quantile argument must lie in [0, 1]")
    idx = np.searchsorted(measure.m[1:], z_arr, side="left")
    out = np.where(z_arr == 0.0, 0.0, measure.q[np.minimum(idx, measure.k - 1)])
    return float(out) if np.isscalar(z) or z_arr.ndim == 0 else out


def pseudometric_d(lam, pair1: AdmissiblePair, pair2: AdmissiblePair) -> float:
    """Integral over z of || Phi1(Q1(z)) - Phi2(Q2(z)) ||_1, computed exactly.

    On each interval of the merged cumulative-mass grid both quantiles are
    constant, so the integral is a finite sum.
    """
    if pair1.map.n_species != pair2.map.n_species:
        raise ValidationError("pairs live on different species sets")
    grid = np.union1d(pair1.measure.m, pair2.measure.m)
    rights = grid[1:]
    widths = np.diff(grid)
    pts1 = pair1.map(quantile(pair1.measure, rights))
    pts2 = pair2.map(quantile(pair2.measure, rights))
    return float(np.sum(widths * np.abs(pts1 - pts2).sum(axis=0)))


def pushforward(pair: AdmissiblePair) -> tuple[np.ndarray, np.ndarray]:
    """Atoms Phi(q_r) (shape (k, S)) and their masses of zeta o Phi^{-1}."""
    atoms = pair.map(pair.measure.q).T
    return atoms, pair.measure.masses


def pushforwards_equal(pair1: AdmissiblePair, pair2: AdmissiblePair,
                       tol: float = 1e-12) -> bool:
    """Compare pushforward measures on sorted, mass-merged atom lists."""
    def canon(pair):
        atoms, masses = pushforward(pair)
        order = np.lexsort(atoms.T[::-1])
        atoms, masses = atoms[order], masses[order]
        out_a, out_m = [atoms[0]], [masses[0]]
        for a, mass in zip(atoms[1:], masses[1:]):
            if np.max(np.abs(a - out_a[-1])) <= tol:
                out_m[-1] += mass
            else:
                out_a.append(a)
                out_m.append(mass)
        return np.array(out_a), np.array(out_m)

    a1, m1 = canon(pair1)
    a2, m2 = canon(pair2)
    if a1.shape != a2.shape:
        return False
    return bool(np.max(np.abs(a1 - a2)) <= tol and np.max(np.abs(m1 - m2)) <= tol)


def mutual_refine(meas1: DiscreteMeasure, meas2: DiscreteMeasure
                  ) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Re-express both measures on the union of their m-grids.

    Atoms are duplicated where one grid is finer than the other; each output
    has the same pushforward as its input.
    """
    grid = np.union1d(meas1.m, meas2.m)
    rights = grid[1:]
    q1 = np.asarray(quantile(meas1, rights))
    q2 = np.asarray(quantile(meas2, rights))
    return DiscreteMeasure(m=grid, q=q1), DiscreteMeasure(m=grid, q=q2)


def as_vectorized_oracle(oracle):
    """Wrap a quantile oracle so it accepts arrays (scalar-only callables
    are lifted with np.vectorize)."""
    probe = np.array([0.25, 0.75])
    try:
        out = np.asarray(oracle(probe), dtype=np.float64)
        if out.shape == probe.shape:
            return oracle
    except (TypeError, ValueError, IndexError):
        pass
    return np.vectorize(oracle, otypes=[np.float64])


def _cdf_from_quantile(oracle, qs: np.ndarray, iters: int = 80) -> np.ndarray:
    """F(q) = Leb{z : Q(z) <= q} by vectorized bisection on a monotone oracle."""
    qs = np.asarray(qs, dtype=np.float64)
    lo = np.zeros_like(qs)
    hi = np.ones_like(qs)
    top = np.asarray(oracle(np.ones_like(qs)), dtype=np.float64)
    done_hi = top <= qs  # Q(1) <= q means F(q) = 1
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = np.asarray(oracle(mid), dtype=np.float64) <= qs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.where(done_hi, 1.0, lo)


def discretize_measure(quantile_oracle, K: int, check_points: int = 512
                       ) -> DiscreteMeasure:
    """Snap a measure given by its quantile function onto the grid {j/K}.

    Atom j/K receives the mass of ((j-1)/K, j/K]; an atom at 0 receives the
    mass of {0}.  For any admissible Phi the distance between the original
    and discretized pairs is at most (1/K) sum_s 1/lam^s.
    """
    if K < 1:
        raise ValidationError("K must be >= 1")
    quantile_oracle = as_vectorized_oracle(quantile_oracle)
    probe = np.linspace(0.0, 1.0, check_points)
    vals = np.asarray(quantile_oracle(probe), dtype=np.float64)
    if np.any(np.diff(vals) < -1e-12):
        raise ValidationError("quantile oracle is not nondecreasing")
    if np.any(vals < -1e-12) or np.any(vals > 1.0 + 1e-12):
        raise ValidationError("quantile oracle must map into [0, 1]")

    grid = np.arange(K + 1) / K
    cdf = _cdf_from_quantile(quantile_oracle, grid)
    masses = np.diff(np.concatenate([[0.0], cdf]))  # first entry = mass at 0
    atoms, kept = [], []
    for j in range(K + 1):
        if masses[j] > 1e-12:
            atoms.append(grid[j])
            kept.append(masses[j])
    kept = np.asarray(kept)
    kept /= kept.sum()
    m = np.concatenate([[0.0], np.cumsum(kept)])
    m[-1] = 1.0
    return DiscreteMeasure(m=m, q=np.asarray(atoms))


def lipschitz_sum(lam) -> float:
    """sum_s 1/lam^s, the l1 Lipschitz constant of any admissible map."""
    lam = np.asarray(lam, dtype=np.float64)
    return float(np.sum(1.0 / lam))
