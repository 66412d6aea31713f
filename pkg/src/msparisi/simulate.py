"""Finite-size Monte Carlo for the product-of-spheres Gibbs measure.

Conventions: a configuration is a flat float64 array with species blocks
contiguous in species order; block s has length counts.counts[s] and squared
norm equal to that length.  The Hamiltonian of a term (p, beta, D2) is

    beta * N^{-(p-1)/2} * sum_{i_vec} sqrt(D2[species(i_vec)]) g_{i_vec} sigma_{i_vec}

with independent standard Gaussians g.  Degrees up to three are supported
with dense storage behind a memory guard; sampling uses exactly
norm-preserving two-coordinate rotations with Metropolis acceptance (see
kernels).  Free energy comes from thermodynamic integration of the mean
energy along an inverse-temperature ramp, averaged over disorder replicas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvexityError, MemoryGuardError, ValidationError
from .model import MixedModel, SpeciesCounts, check_convexity, xi_finite_n
from .parisi import ParisiEvaluation


@dataclass
class Disorder:
    """Raw i.i.d. standard Gaussian couplings per term, keyed by seed."""

    seed: int
    gaussians: list  # per term, array of shape (N,)*p
    _prepared: object = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class PreparedSystem:
    """Symmetrized effective couplings and species layout for the kernels."""

    h1: np.ndarray
    S2: np.ndarray
    S3: np.ndarray
    has_p1: bool
    has_p2: bool
    has_p3: bool
    sp_start: np.ndarray
    sp_size: np.ndarray
    sp_of: np.ndarray


def species_layout(counts: SpeciesCounts):
    sizes = counts.counts
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    sp_of = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
    return starts, sizes.astype(np.int64), sp_of


def build_disorder(model: MixedModel, counts: SpeciesCounts, seed: int,
                   memory_limit: int = 2 << 30) -> Disorder:
    """Materialize the Gaussian couplings for every term; deterministic in seed."""
    N = counts.total
    est = sum(2 * 8 * N ** t.p for t in model.terms)  # factor 2: symmetrized copy
    if est > memory_limit:
        raise MemoryGuardError(
            f"dense disorder storage needs ~{est / 1e6:.0f} MB, "
            f"limit is {memory_limit / 1e6:.0f} MB")
    arrays = []
    for ti, term in enumerate(model.terms):
        if term.p > 3:
            raise ValidationError("simulation supports terms with p <= 3 only")
        rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(ti)]))
        arrays.append(rng.standard_normal((N,) * term.p))
    return Disorder(seed=seed, gaussians=arrays)


def prepare(model: MixedModel, counts: SpeciesCounts, disorder: Disorder
            ) -> PreparedSystem:
    cache_key = (model.content_key(), counts.counts.tobytes())
    if disorder._prepared is not None and disorder._prepared[0] == cache_key:
        return disorder._prepared[1]
    N = counts.total
    starts, sizes, sp_of = species_layout(counts)
    h1 = np.zeros(N)
    S2 = np.zeros((0, 0))
    S3 = np.zeros((0, 0, 0))
    has = {1: False, 2: False, 3: False}
    for term, g in zip(model.terms, disorder.gaussians):
        scale = term.beta / N ** ((term.p - 1) / 2.0)
        D = term.delta_sq
        if term.p == 1:
            h1 += scale * np.sqrt(D[sp_of]) * g
        elif term.p == 2:
            W = np.sqrt(D[sp_of[:, None], sp_of[None, :]])
            C = scale * W * g
            if not has[2]:
                S2 = np.zeros((N, N))
            S2 += 0.5 * (C + C.T)
        else:
            W = np.sqrt(D[sp_of[:, None, None], sp_of[None, :, None], sp_of[None, None, :]])
            C = scale * W * g
            if not has[3]:
                S3 = np.zeros((N, N, N))
            for axes in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
                S3 += np.transpose(C, axes) / 6.0
        has[term.p] = True
    prep = PreparedSystem(h1=h1, S2=S2, S3=S3,
                          has_p1=has[1], has_p2=has[2], has_p3=has[3],
                          sp_start=starts, sp_size=sizes, sp_of=sp_of)
    disorder._prepared = (cache_key, prep)
    return prep


def hamiltonian_eval(model: MixedModel, counts: SpeciesCounts, disorder: Disorder,
                     sigma: np.ndarray) -> float:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (counts.total,):
        raise ValidationError("configuration has wrong length")
    prep = prepare(model, counts, disorder)
    H = 0.0
    if prep.has_p1:
        H += float(prep.h1 @ sigma)
    if prep.has_p2:
        H += float(sigma @ (prep.S2 @ sigma))
    if prep.has_p3:
        H += float(np.einsum("abc,a,b,c->", prep.S3, sigma, sigma, sigma))
    return H


def random_configuration(counts: SpeciesCounts, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the product of spheres (Gaussian block normalization)."""
    starts, sizes, _ = species_layout(counts)
    sigma = rng.standard_normal(counts.total)
    for a, n in zip(starts, sizes):
        block = sigma[a:a + n]
        block *= math.sqrt(n) / np.linalg.norm(block)
    return sigma


def overlap_vector(counts: SpeciesCounts, s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    starts, sizes, _ = species_layout(counts)
    return np.array([float(s1[a:a + n] @ s2[a:a + n]) / n
                     for a, n in zip(starts, sizes)])


# ---------------------------------------------------------------------------
# chain driver


@dataclass
class ChainState:
    sigma: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    scale: float = 0.6


def init_chain(prep: PreparedSystem, sigma: np.ndarray) -> ChainState:
    f2 = 2.0 * (prep.S2 @ sigma) if prep.has_p2 else np.zeros(0)
    f3 = (3.0 * np.einsum("abc,a,b->c", prep.S3, sigma, sigma)
          if prep.has_p3 else np.zeros(0))
    return ChainState(sigma=sigma.copy(), f2=f2, f3=f3)


def run_chain(prep: PreparedSystem, state: ChainState, t: float, n_sweeps: int,
              rng: np.random.Generator, adapt: bool = False):
    """Advance the chain; with adapt=True the proposal scale is tuned toward
    40-60% acceptance in blocks (tuning happens only during equilibration,
    the measurement kernel runs at fixed scale)."""
    if n_sweeps <= 0:
        return np.zeros(0), 0.0
    if not adapt:
        acc, energies = kernels.run_sweeps(
            state.sigma, prep.h1, prep.S2, prep.S3, state.f2, state.f3,
            prep.has_p1, prep.has_p2, prep.has_p3,
            prep.sp_start, prep.sp_size, prep.sp_of,
            t, n_sweeps, state.scale, rng)
        return energies, acc
    block = max(10, n_sweeps // 10)
    done = 0
    energies = []
    acc = 0.0
    while done < n_sweeps:
        n = min(block, n_sweeps - done)
        acc, e = kernels.run_sweeps(
            state.sigma, prep.h1, prep.S2, prep.S3, state.f2, state.f3,
            prep.has_p1, prep.has_p2, prep.has_p3,
            prep.sp_start, prep.sp_size, prep.sp_of,
            t, n, state.scale, rng)
        energies.append(e)
        if acc > 0.6:
            state.scale = min(state.scale * 1.3, math.pi)
        elif acc < 0.4:
            state.scale = max(state.scale / 1.3, 1e-3)
        done += n
    return np.concatenate(energies), acc


def mcmc_step(model: MixedModel, counts: SpeciesCounts, disorder: Disorder,
              sigma: np.ndarray, t: float, rng: np.random.Generator,
              scale: float = 0.6) -> np.ndarray:
    """One sweep of norm-preserving two-coordinate rotations; returns the new
    configuration (the Gibbs measure for t*H is invariant)."""
    if t < 0:
        raise ValidationError("inverse temperature factor must be >= 0")
    prep = prepare(model, counts, disorder)
    state = init_chain(prep, np.asarray(sigma, dtype=np.float64))
    state.scale = scale
    run_chain(prep, state, t, 1, rng)
    return state.sigma


# ---------------------------------------------------------------------------
# free energy by thermodynamic integration


@dataclass
class McEstimate:
    value: float
    stderr: float
    n_disorders: int
    per_disorder: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    equilibration_ok: bool
    t_grid: np.ndarray
    t_means: np.ndarray   # disorder-averaged mean energy density per t node
    t_stderr: np.ndarray
    sweeps: tuple


def _ti_one_disorder(model, counts, t_grid, equil, measure, dseed, cseed):
    disorder = build_disorder(model, counts, int(dseed))
    prep = prepare(model, counts, disorder)
    N = counts.total
    vals = []
    curves = []
    for direction, grid in (("fwd", t_grid), ("bwd", t_grid[::-1])):
        rng = np.random.Generator(np.random.Philox(
            key=[np.uint64(cseed), np.uint64(0 if direction == "fwd" else 1)]))
        state = init_chain(prep, random_configuration(counts, rng))
        means = np.empty(len(grid))
        for i, t in enumerate(grid):
            run_chain(prep, state, float(t), equil, rng, adapt=True)
            energies, _ = run_chain(prep, state, float(t), measure, rng)
            means[i] = energies.mean()
        order = np.argsort(grid)
        vals.append(float(np.trapezoid(means[order] / N, np.asarray(grid)[order])))
        curves.append(means[order] / N)
    return vals[0], vals[1], 0.5 * (curves[0] + curves[1])


def free_energy_ti(model: MixedModel, counts: SpeciesCounts, *, n_disorders: int,
                   t_grid, sweeps_equil: int = 300, sweeps_measure: int = 500,
                   seed: int, workers: int = 1) -> McEstimate:
    """Estimate the disorder-averaged free energy (1/N) E log Z.

    log Z(t=0) vanishes because the reference measure is a probability
    measure, so (1/N) log Z = integral over t of the mean energy density
    under the Gibbs measure for t*H.  The ramp is run in both directions
    from fresh starts; disagreement beyond three combined standard errors
    flags insufficient equilibration.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if len(t_grid) < 8 or t_grid[0] != 0.0 or abs(t_grid[-1] - 1.0) > 1e-12:
        raise ValidationError("t_grid must run from 0 to 1 with at least 8 nodes")
    if n_disorders < 1:
        raise ValidationError("need at least one disorder replica")
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(2 * n_disorders, dtype=np.uint64).reshape(n_disorders, 2)
    jobs = [(model, counts, t_grid, sweeps_equil, sweeps_measure, int(s[0]), int(s[1]))
            for s in seeds]
    if workers > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_ti_job, jobs))
    else:
        results = [_ti_job(j) for j in jobs]
    fwd = np.array([r[0] for r in results])
    bwd = np.array([r[1] for r in results])
    curves = np.stack([r[2] for r in results])
    per = 0.5 * (fwd + bwd)
    value = float(per.mean())
    stderr = float(per.std(ddof=1) / math.sqrt(n_disorders)) if n_disorders > 1 else float("inf")
    diff = fwd - bwd
    diff_err = (diff.std(ddof=1) / math.sqrt(n_disorders)) if n_disorders > 1 else float("inf")
    equil_ok = bool(abs(diff.mean()) <= 3.0 * diff_err + 1e-12) if np.isfinite(diff_err) else True
    t_stderr = (curves.std(axis=0, ddof=1) / math.sqrt(n_disorders)
                if n_disorders > 1 else np.full(len(t_grid), np.inf))
    return McEstimate(value=value, stderr=stderr, n_disorders=n_disorders,
                      per_disorder=per, forward=fwd, backward=bwd,
                      equilibration_ok=equil_ok, t_grid=t_grid,
                      t_means=curves.mean(axis=0), t_stderr=t_stderr,
                      sweeps=(sweeps_equil, sweeps_measure))


def _ti_job(args):
    model, counts, t_grid, equil, measure, dseed, cseed = args
    return _ti_one_disorder(model, counts, t_grid, equil, measure, dseed, cseed)


def annealed_value(model: MixedModel, counts: SpeciesCounts) -> float:
    """(1/N) log E Z = xi_N(1)/2, an upper bound for the quenched value."""
    return 0.5 * xi_finite_n(model, counts, np.ones(model.n_species))


# ---------------------------------------------------------------------------
# covariance self-test


@dataclass(frozen=True)
class CovarianceReport:
    z_scores: np.ndarray
    empirical: np.ndarray
    exact: np.ndarray
    ok: bool


def coupling_coefficients(model: MixedModel, counts: SpeciesCounts,
                          sigma: np.ndarray) -> np.ndarray:
    """Flattened coefficients a(sigma) with H = <g, a(sigma)> over all terms;
    the disorder covariance of H(s), H(s') is exactly a(s).a(s')."""
    N = counts.total
    _, _, sp_of = species_layout(counts)
    parts = []
    for term in model.terms:
        if term.p > 3:
            raise ValidationError("simulation supports terms with p <= 3 only")
        scale = term.beta / N ** ((term.p - 1) / 2.0)
        D = term.delta_sq
        if term.p == 1:
            parts.append(scale * np.sqrt(D[sp_of]) * sigma)
        elif term.p == 2:
            W = np.sqrt(D[sp_of[:, None], sp_of[None, :]])
            parts.append((scale * W * np.outer(sigma, sigma)).ravel())
        else:
            W = np.sqrt(D[sp_of[:, None, None], sp_of[None, :, None], sp_of[None, None, :]])
            parts.append((scale * W * np.einsum("i,j,k->ijk", sigma, sigma, sigma)).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def covariance_selftest(model: MixedModel, counts: SpeciesCounts, *,
                        trials: int = 10_000, pairs: int = 8, seed: int = 0,
                        z_limit: float = 4.0) -> CovarianceReport:
    """Empirical disorder covariance of H(s), H(s') against N xi_N(R(s, s'))."""
    if trials < 100:
        raise ValidationError("need at least 100 trials")
    rng = np.random.default_rng(seed)
    N = counts.total
    zs, emp, exact = [], [], []
    for _ in range(pairs):
        s1 = random_configuration(counts, rng)
        s2 = random_configuration(counts, rng)
        a1 = coupling_coefficients(model, counts, s1)
        a2 = coupling_coefficients(model, counts, s2)
        G = rng.standard_normal((trials, len(a1))) if len(a1) else np.zeros((trials, 0))
        h1 = G @ a1
        h2 = G @ a2
        prod = h1 * h2
        cov = float(prod.mean() - h1.mean() * h2.mean())
        err = float(prod.std(ddof=1) / math.sqrt(trials)) if len(a1) else 0.0
        target = N * xi_finite_n(model, counts, overlap_vector(counts, s1, s2))
        zs.append((cov - target) / err if err > 0 else 0.0)
        emp.append(cov)
        exact.append(target)
    zs = np.asarray(zs)
    return CovarianceReport(z_scores=zs, empirical=np.asarray(emp),
                            exact=np.asarray(exact),
                            ok=bool(np.all(np.abs(zs) <= z_limit)))


# ---------------------------------------------------------------------------
# overlap sampling and diagnostics


@dataclass
class OverlapSamples:
    """Pairwise overlaps of independent chains under shared disorder.

    rs has shape (snapshots, chains, chains, species); r is the
    lam(N)-weighted average over species.
    """

    rs: np.ndarray
    r: np.ndarray
    counts: SpeciesCounts

    def pair_values(self):
        """Flatten distinct ordered chain pairs: returns (r, rs) arrays."""
        iu = np.triu_indices(self.r.shape[1], k=1)
        return (self.r[:, iu[0], iu[1]].ravel(),
                self.rs[:, iu[0], iu[1], :].reshape(-1, self.rs.shape[-1]))

    def pair_table(self):
        """Rows (snapshot, chain_1, chain_2, r, rs...) over distinct pairs."""
        T, C = self.r.shape[0], self.r.shape[1]
        iu = np.triu_indices(C, k=1)
        rows = []
        for t in range(T):
            for c1, c2 in zip(*iu):
                rows.append([t, int(c1), int(c2), self.r[t, c1, c2],
                             *self.rs[t, c1, c2]])
        return rows


def overlap_stats(model: MixedModel, counts: SpeciesCounts, disorder: Disorder,
                  t: float, chains: int, *, sweeps_equil: int = 200,
                  snapshots: int = 50, thin: int = 10, seed: int = 0
                  ) -> OverlapSamples:
    if chains < 2:
        raise ValidationError("need at least two chains")
    prep = prepare(model, counts, disorder)
    starts, sizes, _ = species_layout(counts)
    states = []
    rngs = []
    for c in range(chains):
        rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(c)]))
        state = init_chain(prep, random_configuration(counts, rng))
        run_chain(prep, state, t, sweeps_equil, rng, adapt=True)
        states.append(state)
        rngs.append(rng)
    S = model.n_species
    rs = np.empty((snapshots, chains, chains, S))
    for n in range(snapshots):
        for state, rng in zip(states, rngs):
            run_chain(prep, state, t, thin, rng)
        for c1 in range(chains):
            for c2 in range(chains):
                rs[n, c1, c2] = overlap_vector(counts, states[c1].sigma, states[c2].sigma)
    r = rs @ counts.lam_n
    return OverlapSamples(rs=rs, r=r, counts=counts)


@dataclass(frozen=True)
class GuerraGap:
    gap: float
    ok: bool
    threshold: float
    allowance: float


def guerra_gap(model: MixedModel, counts: SpeciesCounts, mc: McEstimate,
               variational: ParisiEvaluation, allowance: float = 0.05) -> GuerraGap:
    """Variational value minus MC estimate; the interpolation bound says the
    gap is nonnegative in the limit, so finite size plus noise set the floor.
    Refuses non-convex models: the bound is only proven under convexity."""
    report = check_convexity(model)
    if not report.ok:
        raise ConvexityError(
            f"model fails the convexity check (min Hessian eigenvalue "
            f"{report.min_eigenvalue:.3e} at {report.worst_point}); "
            "the interpolation bound does not apply")
    gap = variational.value - mc.value
    threshold = -3.0 * mc.stderr - allowance
    return GuerraGap(gap=gap, ok=bool(gap >= threshold), threshold=threshold,
                     allowance=allowance)


def isotonic_fit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Nondecreasing least-squares fit (pool adjacent violators)."""
    order = np.argsort(x, kind="stable")
    vals = y[order].astype(np.float64)
    w = np.ones_like(vals)
    level, weight, count = [], [], []
    for v, wt in zip(vals, w):
        level.append(v)
        weight.append(wt)
        count.append(1)
        while len(level) > 1 and level[-2] > level[-1]:
            tw = weight[-1] + weight[-2]
            lv = (level[-1] * weight[-1] + level[-2] * weight[-2]) / tw
            level[-2:] = [lv]
            weight[-2:] = [tw]
            count[-2:] = [count[-1] + count[-2]]
    fit_sorted = np.repeat(level, count)
    fit = np.empty_like(fit_sorted)
    fit[order] = fit_sorted
    return fit


@dataclass(frozen=True)
class GGRow:
    f_degree: int
    psi_degree: int
    observed: float
    null_mean: float
    null_std: float
    z: float


@dataclass(frozen=True)
class SyncScatter:
    r: np.ndarray
    rs: np.ndarray          # (n, S)
    fitted: np.ndarray      # (n, S)
    residual_rms: np.ndarray  # (S,)


def overlap_diagnostics(samples, n_null: int = 200, seed: int = 0
                        ) -> tuple[list[GGRow], SyncScatter]:
    """Finite-size identity discrepancies plus the synchronization scatter.

    For monomials f, psi the discrepancy
    E<f(R12) psi(R13)> - (1/2) E<f> E<psi(R12)> - (1/2) E<f(R12) psi(R12)>
    is evaluated on canonical chain labels and compared against the spread of
    random chain relabelings (no convergence is asserted at finite size; the
    identities are only guaranteed in a perturbed limit).  The scatter is the
    per-species overlap against the averaged overlap with an isotonic fit.
    """
    if isinstance(samples, OverlapSamples):
        samples = [samples]
    C = samples[0].r.shape[1]
    if C < 3:
        raise ValidationError("the three-replica diagnostic needs >= 3 chains")
    rng = np.random.default_rng(seed)

    def discrepancy(perms):
        vals = []
        for sample, perm in zip(samples, perms):
            p = perm
            r12 = sample.r[:, p[0], p[1]]
            r13 = sample.r[:, p[0], p[2]]
            vals.append(np.stack([r12, r13], axis=1))
        both = np.concatenate(vals, axis=0)
        rows = {}
        for fd in (1, 2):
            for pd in (1, 2):
                f = both[:, 0] ** fd
                psi13 = both[:, 1] ** pd
                psi12 = both[:, 0] ** pd
                rows[(fd, pd)] = (float(np.mean(f * psi13))
                                  - 0.5 * float(np.mean(f)) * float(np.mean(psi12))
                                  - 0.5 * float(np.mean(f * psi12)))
        return rows

    ident = [np.arange(C)] * len(samples)
    obs = discrepancy(ident)
    null_rows = {key: [] for key in obs}
    for _ in range(n_null):
        perms = [rng.permutation(C) for _ in samples]
        for key, val in discrepancy(perms).items():
            null_rows[key].append(val)
    gg = []
    for (fd, pd), val in obs.items():
        arr = np.asarray(null_rows[(fd, pd)])
        std = float(arr.std(ddof=1))
        z = (val - float(arr.mean())) / std if std > 0 else 0.0
        gg.append(GGRow(f_degree=fd, psi_degree=pd, observed=val,
                        null_mean=float(arr.mean()), null_std=std, z=z))

    r_all, rs_all = [], []
    for sample in samples:
        rr, rrs = sample.pair_values()
        r_all.append(rr)
        rs_all.append(rrs)
    r_all = np.concatenate(r_all)
    rs_all = np.concatenate(rs_all, axis=0)
    S = rs_all.shape[1]
    fitted = np.stack([isotonic_fit(r_all, rs_all[:, s]) for s in range(S)], axis=1)
    resid = np.sqrt(np.mean((rs_all - fitted) ** 2, axis=0))
    scatter = SyncScatter(r=r_all, rs=rs_all, fitted=fitted, residual_rms=resid)
    return gg, scatter
