"""Evaluation and minimization of the variational free-energy functional.

For a finitely supported measure with cumulative masses m_0..m_k and atoms
q_1..q_k, write u^s_r = xi_s(Phi(q_r)) for r = 1..k (u^s_0 = 0,
u^s_{k+1} = xi_s(1)) and w_r = theta(Phi(q_r)).  The level profile

    d^s_r = sum_{r'=r}^{k} m_{r'} (u^s_{r'+1} - u^s_{r'}),   d^s_{k+1} = 0,

is nonincreasing in r, and the functional evaluates to the closed form

    A(zeta, Phi, b) = sum_s (lam^s/2) [ b^s - 1 - log b^s
                      + u^s_1 / (b^s - d^s_1)
                      + sum_r (1/m_r) log((b^s - d^s_{r+1}) / (b^s - d^s_r)) ]
                      - (1/2) sum_r m_r (w_{r+1} - w_r),

defined for b^s > d^s_1.  An external field h_s adds
(lam^s/2) h_s^2 / (b^s - d^s_1).  A is strictly convex in each b^s, the
b-minimization decouples across species, and duplicate atoms contribute
zero to every sum, so refining a measure representation never changes the
value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import kernels
from .admissible import AdmissiblePair, DiscreteMeasure, SyncMap, identity_map
from .errors import NumericalError, ValidationError
from .model import (MixedModel, c_star, theta_batch, xi_s_batch,
                    xi_s_jacobian_batch)


@dataclass(frozen=True)
class BVector:
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=np.float64)))


@dataclass(frozen=True)
class ParisiEvaluation:
    value: float
    b_opt: np.ndarray
    d_profile: np.ndarray       # (S, k+1): d^s_r for r = 1..k+1
    residuals: np.ndarray       # per-species |dA/db^s| at b_opt
    boundary: np.ndarray        # per-species flag: infimum pinned at the domain edge
    field: np.ndarray | None = None


@dataclass(frozen=True)
class Levels:
    """Per-level data shared by every evaluation of the functional."""

    m: np.ndarray   # (k+1,)
    u: np.ndarray   # (S, k+2)
    w: np.ndarray   # (k+2,)
    d: np.ndarray   # (S, k+2); d[:, 0] == d[:, 1], d[:, k+1] == 0

    @property
    def k(self) -> int:
        return len(self.m) - 1


def compute_levels(model: MixedModel, pair: AdmissiblePair) -> Levels:
    S = model.n_species
    meas, sync = pair.measure, pair.map
    k = meas.k
    u = np.zeros((S, k + 2))
    w = np.zeros(k + 2)
    points = np.concatenate([sync(meas.q), np.ones((S, 1))], axis=1)  # atoms + 1
    u[:, 1:] = xi_s_batch(model, points)
    w[1:] = theta_batch(model, points)
    du = np.maximum(u[:, 2:] - u[:, 1:k + 1], 0.0)      # (S, k), increments r=1..k
    d = np.zeros((S, k + 2))
    d[:, 1:k + 1] = (du * meas.m[1:])[:, ::-1].cumsum(axis=1)[:, ::-1]
    d[:, 0] = d[:, 1]
    return Levels(m=meas.m.copy(), u=u, w=w, d=d)


def d_profile(model: MixedModel, pair: AdmissiblePair) -> np.ndarray:
    """Arrays d^s_r for r = 1..k+1 (last column is zero)."""
    return compute_levels(model, pair).d[:, 1:]


def _species_g(b, num0: float, m: np.ndarray, d_row: np.ndarray):
    """Per-species summand (without the lam/2 factor); vectorized over b."""
    b = np.asarray(b, dtype=np.float64)
    bb = b[..., None]
    k = len(m) - 1
    logs = np.log(bb - d_row[1:k + 2]) - np.log(bb - d_row[0:k + 1])
    # level r term uses (d_{r+1}, d_r) = (d_row[r+1], d_row[r]); d_row index 0
    # is the sentinel copy of d_1, so slice from 1.
    core = (logs[..., 1:] / m[1:]).sum(axis=-1)
    return b - 1.0 - np.log(b) + num0 / (b - d_row[1]) + core


def _field_array(model: MixedModel, h) -> np.ndarray:
    if h is None:
        return np.zeros(model.n_species)
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    if h.shape != (model.n_species,):
        raise ValidationError("field must have one entry per species")
    return h


def a_value(model: MixedModel, pair: AdmissiblePair, b, h=None) -> float:
    """A(zeta, Phi, b) at an explicit b vector."""
    if isinstance(b, BVector):
        b = b.b
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    h = _field_array(model, h)
    lev = compute_levels(model, pair)
    margins = b - lev.d[:, 1]
    if np.any(margins < 1e-12):
        s = int(np.argmin(margins))
        raise ValidationError(
            f"b constraint violated for species {model.species[s]!r}: "
            f"b={b[s]:.6g} <= d_1={lev.d[s, 1]:.6g}")
    total = 0.0
    for s in range(model.n_species):
        num0 = lev.u[s, 1] + h[s] ** 2
        total += 0.5 * model.lam[s] * float(_species_g(b[s], num0, lev.m, lev.d[s]))
    total -= 0.5 * float(np.sum(lev.m[1:] * (lev.w[2:] - lev.w[1:-1])))
    return total


def inner_min_b(model: MixedModel, pair: AdmissiblePair, h=None) -> ParisiEvaluation:
    """Minimize A over b; decoupled one-dimensional strictly convex problems."""
    h = _field_array(model, h)
    lev = compute_levels(model, pair)
    return _inner_min_from_levels(model, lev, h)


def _inner_min_from_levels(model: MixedModel, lev: Levels, h: np.ndarray
                           ) -> ParisiEvaluation:
    S = model.n_species
    k = lev.k
    num0 = lev.u[:, 1] + h ** 2
    du = np.maximum(lev.d[:, 1:k + 1] - lev.d[:, 2:k + 2], 0.0) / lev.m[1:]
    b_opt, resid = kernels.solve_b(num0, lev.d, du)
    boundary = np.zeros(S, dtype=bool)
    total = 0.0
    for s in range(S):
        total += 0.5 * model.lam[s] * float(_species_g(b_opt[s], num0[s], lev.m, lev.d[s]))
    total -= 0.5 * float(np.sum(lev.m[1:] * (lev.w[2:] - lev.w[1:-1])))
    resid = resid * 0.5 * model.lam
    return ParisiEvaluation(value=float(total), b_opt=b_opt, d_profile=lev.d[:, 1:],
                            residuals=resid, boundary=boundary,
                            field=None if not h.any() else h.copy())


def parisi_value(model: MixedModel, pair: AdmissiblePair, h=None) -> float:
    return inner_min_b(model, pair, h=h).value


# ---------------------------------------------------------------------------
# functional for general measures supplied as quantile oracles


def a_value_general(model: MixedModel, quantile_oracle, sync: SyncMap, b,
                    quadrature_points: int = 4096, h=None) -> float:
    """A(zeta, Phi, b) for a measure given only through its quantile function.

    The theta integral is rewritten with the quantile identity as
    theta(1) - int theta(Phi(Q(z))) dz; the remaining q-integral of
    (xi_s o Phi)'(q) / (b - d^s(q)) is evaluated by panel-wise Gauss-Legendre
    with panels split at the map knots and at every atom the oracle reveals,
    so finitely supported measures are handled to quadrature precision.
    """
    from .admissible import _cdf_from_quantile, as_vectorized_oracle

    if quadrature_points < 2:
        raise ValidationError("quadrature_points must be >= 2")
    quantile_oracle = as_vectorized_oracle(quantile_oracle)
    if isinstance(b, BVector):
        b = b.b
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    h = _field_array(model, h)
    S = model.n_species
    lam = model.lam
    edges = np.stack([np.ones(S), np.zeros(S)], axis=1)
    xi_s_edge = xi_s_batch(model, edges)
    xi_s_one, xi_s_zero = xi_s_edge[:, 0], xi_s_edge[:, 1]
    theta_one = float(theta_batch(model, edges)[0])

    # breakpoints: map knots plus every distinct oracle value (atoms)
    n_probe = int(max(2048, min(quadrature_points, 1 << 15)))
    probe = np.asarray(quantile_oracle(np.linspace(0.0, 1.0, n_probe)), dtype=np.float64)
    qbreaks = np.unique(np.concatenate([[0.0, 1.0], sync.knots, np.round(probe, 12)]))
    qbreaks = qbreaks[(qbreaks >= 0.0) & (qbreaks <= 1.0)]
    zbreaks = _cdf_from_quantile(quantile_oracle, qbreaks)
    zbreaks = np.unique(np.concatenate([[0.0, 1.0], zbreaks]))

    n_panels = max(len(qbreaks), len(zbreaks))
    n_gl = int(np.clip(quadrature_points // max(n_panels, 1), 8, 200))
    gl_x, gl_w = np.polynomial.legendre.leggauss(n_gl)

    def panel_nodes(breaks):
        a, bb = breaks[:-1], breaks[1:]
        half = 0.5 * (bb - a)
        nodes = a[:, None] + half[:, None] * (gl_x + 1.0)
        weights = half[:, None] * gl_w
        keep = half > 0
        return nodes[keep].ravel(), weights[keep].ravel()

    # z-space integrals of xi_s(Phi(Q(z))) and theta(Phi(Q(z)))
    z_nodes, z_weights = panel_nodes(zbreaks)
    q_of_z = np.asarray(quantile_oracle(z_nodes), dtype=np.float64)
    phi_z = sync(q_of_z)  # (S, nz)
    xi_vals = xi_s_batch(model, phi_z)
    theta_vals = theta_batch(model, phi_z)
    theta_integral = theta_one - float(np.sum(z_weights * theta_vals))

    # tail integral T^s(z) = int_z^1 xi_s(Phi(Q)) dz' at arbitrary z, via the
    # cumulative panel sums plus an exact partial panel
    order = np.argsort(z_nodes)
    zs_sorted = z_nodes[order]
    contrib_sorted = (z_weights[None, :] * xi_vals)[:, order]
    suffix = np.concatenate([contrib_sorted[:, ::-1].cumsum(axis=1)[:, ::-1],
                             np.zeros((S, 1))], axis=1)

    def tail(z_points):
        """T^s(z) = int_z^1 xi_s(Phi(Q)) dz': cumulative panel sums from the
        right plus an exact Gauss-Legendre sub-panel up to the next break."""
        z_points = np.asarray(z_points, dtype=np.float64)
        idx = np.searchsorted(zbreaks, z_points, side="right")
        z_hi = zbreaks[np.minimum(idx, len(zbreaks) - 1)]
        half = 0.5 * (z_hi - z_points)
        nodes = z_points[:, None] + half[:, None] * (gl_x + 1.0)
        qv = np.asarray(quantile_oracle(np.clip(nodes.ravel(), 0.0, 1.0)),
                        dtype=np.float64)
        vals = xi_s_batch(model, sync(qv)).reshape(S, len(z_points), n_gl)
        sub = (vals * (half[None, :, None] * gl_w)).sum(axis=2)
        coarse_hi = suffix[:, np.searchsorted(zs_sorted, z_hi, side="left")]
        return coarse_hi + sub

    def d_of_q(q_points):
        """d^s(q) = xi_s(1) - F(q) xi_s(Phi(q)) - T^s(F(q)), shape (S, nq)."""
        q_points = np.asarray(q_points, dtype=np.float64)
        F = _cdf_from_quantile(quantile_oracle, q_points)
        xis = xi_s_batch(model, sync(q_points))
        return xi_s_one[:, None] - F[None, :] * xis - tail(F)

    d_zero = d_of_q(np.array([0.0]))[:, 0]
    margins = b - d_zero
    if np.any(margins < 1e-12):
        s = int(np.argmin(margins))
        raise ValidationError(
            f"b constraint violated for species {model.species[s]!r}: "
            f"b={b[s]:.6g} <= d(0)={d_zero[s]:.6g}")

    q_nodes, q_weights = panel_nodes(qbreaks)
    d_at_q = d_of_q(q_nodes)
    slopes = sync.slopes()  # (S, n_knot_intervals)
    seg = np.clip(np.searchsorted(sync.knots, q_nodes, side="right") - 1,
                  0, slopes.shape[1] - 1)
    jac = xi_s_jacobian_batch(model, sync(q_nodes))  # (S, T, n)
    dpsi = np.einsum("stn,tn->sn", jac, slopes[:, seg])  # (xi_s o Phi)'(q)

    total = 0.0
    for s in range(S):
        integral = float(np.sum(q_weights * dpsi[s] / (b[s] - d_at_q[s])))
        total += 0.5 * lam[s] * (b[s] - 1.0 - np.log(b[s])
                                 + (xi_s_zero[s] + h[s] ** 2) / (b[s] - d_zero[s])
                                 + integral)
    return total - 0.5 * theta_integral


# ---------------------------------------------------------------------------
# outer minimization over admissible pairs


@dataclass(frozen=True)
class LipschitzCheck:
    lhs: float
    rhs: float
    ok: bool


def lipschitz_check(model: MixedModel, pair1: AdmissiblePair, pair2: AdmissiblePair,
                    tol: float = 1e-8) -> LipschitzCheck:
    """|P(pair1) - P(pair2)| against (C_*/2) D(pair1, pair2)."""
    from .admissible import pseudometric_d

    lhs = abs(parisi_value(model, pair1) - parisi_value(model, pair2))
    rhs = 0.5 * c_star(model) * pseudometric_d(model.lam, pair1, pair2)
    return LipschitzCheck(lhs=lhs, rhs=rhs, ok=lhs <= rhs + tol)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -36.0, 36.0)))


class PairParametrization:
    """Unconstrained coordinates for k-level admissible pairs.

    Masses come from a softmax over k logits, atom locations from sorted
    sigmoids, and the map increment at each atom from a per-level simplex;
    values capped at one have their excess redistributed onto species with
    slack, which preserves the joint constraint and monotonicity.
    """

    def __init__(self, model: MixedModel, k: int):
        if k < 1:
            raise ValidationError("k must be >= 1")
        self.model = model
        self.k = k
        self.S = model.n_species
        self.with_mass = k > 1
        self.with_phi = self.S > 1
        self.ndim = (k if self.with_mass else 0) + k + (k * self.S if self.with_phi else 0)

    def decode(self, x: np.ndarray) -> AdmissiblePair:
        x = np.asarray(x, dtype=np.float64)
        k, S, lam = self.k, self.S, self.model.lam
        pos = 0
        if self.with_mass:
            incr = _softmax(x[:k])
            pos = k
            m = np.concatenate([[0.0], np.cumsum(incr)])
            m[-1] = 1.0
            m[1:-1] = np.clip(m[1:-1], 1e-12, 1.0 - 1e-12)
            m[1:-1] = np.maximum.accumulate(m[1:-1])
        else:
            m = np.array([0.0, 1.0])
        q = np.sort(_sigmoid(x[pos:pos + k]))
        pos += k
        if self.with_phi:
            logits = x[pos:].reshape(k, S)
            vals = np.zeros((S, k))
            prev_q = 0.0
            prev_v = np.zeros(S)
            for r in range(k):
                y = _softmax(logits[r])
                v = prev_v + (q[r] - prev_q) * (y / lam)
                v = _cap_redistribute(v, lam, q[r])
                vals[:, r] = v
                prev_q, prev_v = q[r], v
            sync = _map_through_atoms(q, vals)
        else:
            sync = identity_map(1)
        measure = DiscreteMeasure(m=m, q=q)
        return AdmissiblePair(measure=measure, map=sync)

    def encode(self, pair: AdmissiblePair) -> np.ndarray:
        """Approximate inverse of decode, for warm starts."""
        k, S, lam = self.k, self.S, self.model.lam
        meas = pair.measure
        if meas.k != k:
            raise ValidationError(f"pair has {meas.k} levels, expected {k}")
        parts = []
        if self.with_mass:
            parts.append(np.log(np.maximum(meas.masses, 1e-12)))
        qc = np.clip(meas.q, 1e-9, 1.0 - 1e-9)
        parts.append(np.log(qc / (1.0 - qc)))
        if self.with_phi:
            vals = pair.map(meas.q)  # (S, k)
            prev_q, prev_v = 0.0, np.zeros(S)
            logits = np.zeros((k, S))
            for r in range(k):
                dq = meas.q[r] - prev_q
                if dq > 1e-12:
                    y = lam * (vals[:, r] - prev_v) / dq
                else:
                    y = lam.copy()
                logits[r] = np.log(np.maximum(y, 1e-12))
                prev_q, prev_v = meas.q[r], vals[:, r]
            parts.append(logits.ravel())
        return np.concatenate(parts)


def _cap_redistribute(v: np.ndarray, lam: np.ndarray, level: float) -> np.ndarray:
    """Clip coordinates at 1, pushing the clipped lam-mass onto the slack of
    the others; keeps sum(lam * v) = level exactly and v in [0, 1]."""
    v = np.minimum(v, 1.0 + 1e-15)
    excess = float(np.sum(lam * np.maximum(v - 1.0, 0.0)))
    if excess <= 0.0:
        return np.minimum(v, 1.0)
    v = np.minimum(v, 1.0)
    slack = float(np.sum(lam * (1.0 - v)))
    if slack <= 0.0:
        return v
    v = v + excess * (1.0 - v) / slack
    return np.minimum(v, 1.0)


def _map_through_atoms(q: np.ndarray, vals: np.ndarray) -> SyncMap:
    """Piecewise-linear map with knots {0, q_1.., 1} and given atom values."""
    S = vals.shape[0]
    knots = [0.0]
    cols = [np.zeros(S)]
    for r in range(len(q)):
        if q[r] - knots[-1] > 1e-13:
            knots.append(q[r])
            cols.append(vals[:, r])
    if 1.0 - knots[-1] > 1e-13:
        knots.append(1.0)
        cols.append(np.ones(S))
    else:
        cols[-1] = np.ones(S)
        knots[-1] = 1.0
    return SyncMap(knots=np.asarray(knots), values=np.stack(cols, axis=1))


def embed_pair(pair: AdmissiblePair, k: int) -> AdmissiblePair:
    """Represent the same measure with k levels by splitting the largest mass."""
    meas = pair.measure
    if meas.k > k:
        raise ValidationError("cannot embed into fewer levels")
    m, q = meas.m, meas.q
    while len(q) < k:
        j = int(np.argmax(np.diff(m)))
        mid = 0.5 * (m[j] + m[j + 1])
        m = np.insert(m, j + 1, mid)
        q = np.insert(q, j + 1, q[j])
    return AdmissiblePair(measure=DiscreteMeasure(m=m, q=q), map=pair.map)


@dataclass
class MinimizeReport:
    start_values: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    n_evals: int = 0
    best_start: int = -1


@dataclass
class MinimizeResult:
    pair: AdmissiblePair
    evaluation: ParisiEvaluation
    report: MinimizeReport


def _objective_value(model: MixedModel, par: PairParametrization,
                     h_arr: np.ndarray, x: np.ndarray) -> float:
    try:
        pair = par.decode(x)
        lev = compute_levels(model, pair)
        return _inner_min_from_levels(model, lev, h_arr).value
    except (NumericalError, FloatingPointError):
        return np.inf


def _run_one_start(args):
    model, k, h_arr, x0, maxiter = args
    par = PairParametrization(model, k)
    res = optimize.minimize(lambda x: _objective_value(model, par, h_arr, x),
                            x0, method="Nelder-Mead",
                            options={"maxiter": maxiter, "xatol": 1e-9,
                                     "fatol": 1e-12, "adaptive": True})
    return res.x, float(res.fun), bool(res.success), int(res.nfev)


def minimize_parisi(model: MixedModel, k: int, h=None, *, seed: int,
                    n_starts: int = 16, maxiter: int | None = None,
                    extra_starts: tuple = (), workers: int = 1) -> MinimizeResult:
    """Multi-start Nelder-Mead over the reparametrized k-level pair space.

    Each iterate is scored by the exact inner b-minimization.  Starts run
    independently (in parallel when workers > 1) and reduce by minimum
    value in start order, so results are deterministic given the seed.
    Non-convergent starts are kept (flagged in the report) and the best
    iterate found is returned regardless.
    """
    h_arr = _field_array(model, h)
    par = PairParametrization(model, k)
    rng = np.random.default_rng(seed)

    x0s = [np.zeros(par.ndim)]
    rs_logits = np.zeros(par.ndim)
    rs_logits[(par.k if par.with_mass else 0):][:k] = -6.0  # atoms near zero
    x0s.append(rs_logits)
    for p in extra_starts:
        x0s.append(par.encode(embed_pair(p, k)))
    while len(x0s) < n_starts + len(extra_starts):
        x0s.append(rng.normal(scale=2.0, size=par.ndim))

    maxiter = maxiter or 400 * max(par.ndim, 1)
    jobs = [(model, k, h_arr, x0, maxiter) for x0 in x0s]
    if workers > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one_start, jobs))
    else:
        results = [_run_one_start(j) for j in jobs]

    report = MinimizeReport()
    best_x, best_val = None, np.inf
    for i, (x, val, ok, nfev) in enumerate(results):
        report.start_values.append(val)
        report.converged.append(ok)
        report.n_evals += nfev
        if val < best_val:
            best_val, best_x = val, x
            report.best_start = i
    if best_x is None:
        raise NumericalError("all optimizer starts failed")
    pair = par.decode(best_x)
    evaluation = inner_min_b(model, pair, h=h)
    return MinimizeResult(pair=pair, evaluation=evaluation, report=report)
