"""Poisson-Dirichlet cascades, the hierarchical expectation recursion, and
the finite-size functionals whose large-size limit is the variational value.

Cascade sampling.  A node branching with parameter m draws the ranked points
u_n = Gamma_n^{-1/m} of a Poisson process with intensity x^{-1-m} dx (Gamma_n
are unit-rate arrival times).  Per node we draw ``oversample * fanout``
points; the top ``fanout`` are branched (get subtrees), and the stored leaf
weights are the renormalized products of branched point sizes down the tree.
Pair sampling cannot use per-node point sizes alone: the probability of
entering a child is proportional to the point size times the total mass of
the subtree hanging below it, and those totals are heavy-tailed precisely
when m is large.  The overlap sampler therefore carries bottom-up subtree
totals over the full oversampled width (children of the last level need no
subtree, so they all participate), which removes the O(fanout^{1-1/m})
truncate-and-renormalize bias -- a few percent at fanout 64, m = 0.6, well
above Monte Carlo resolution at ensemble sizes of interest.  All weights are
kept in log domain because point sizes overflow for small m.

Hierarchical recursion.  Given a leaf functional F_k of independent level
variables z_0..z_{k-1}, the backward iteration

    F_r = (1/m_r) log E_r exp(m_r F_{r+1}),   F_0 = E_0 F_1,

computes the cascade average E log < exp F >.  Expectations are realized by
Gauss-Hermite quadrature (scalar Gaussian levels) or nested Monte Carlo with
declared per-level sample counts; exponentials live in log domain throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .admissible import AdmissiblePair
from .errors import NumericalError, ValidationError
from .model import MixedModel
from .parisi import compute_levels

_MC_BUDGET = 1 << 24  # max elements per Monte Carlo batch


@dataclass(frozen=True)
class CascadeSpec:
    m: np.ndarray
    fanout: int
    oversample: int = 8

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "m", m)
        if m[0] != 0.0 or abs(m[-1] - 1.0) > 1e-12 or np.any(np.diff(m) <= 0):
            raise ValidationError("m must satisfy 0 = m_0 < ... < m_k = 1")
        if self.fanout < 2:
            raise ValidationError("fanout must be >= 2")
        if self.oversample < 1:
            raise ValidationError("oversample must be >= 1")

    @property
    def k(self) -> int:
        return len(self.m) - 1


@dataclass
class CascadeTree:
    spec: CascadeSpec
    descent_logw: list        # per depth: (n_nodes, width + 1) log weights,
                              # subtree-weighted, last column = Poisson remainder
    leaf_weights: np.ndarray  # (fanout ** (k-1),), sums to 1, sorted per node


def tree_rng(seed: int, tree_id: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, tree id): trees are reproducible
    independently of how many are drawn or in what order."""
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed) & np.uint64(2**64 - 1),
                                                     np.uint64(tree_id)]))


def sample_cascade(spec: CascadeSpec, rng: np.random.Generator) -> CascadeTree:
    k = spec.k
    fanout, width = spec.fanout, spec.fanout * spec.oversample
    child_logu = []
    log_tail = []
    n_nodes = 1
    for depth in range(k - 1):
        mr = float(spec.m[depth + 1])
        gam = np.cumsum(rng.exponential(size=(n_nodes, width)), axis=1)
        logu = -np.log(gam) / mr                       # log of ranked point sizes
        child_logu.append(logu)
        # expected Poisson mass below the smallest drawn point
        log_tail.append((1.0 - mr) * logu[:, -1] - math.log(1.0 - mr))
        n_nodes *= fanout

    # bottom-up log subtree totals; leaves have log T = 0
    descent_logw = [None] * (k - 1)
    child_logT = None  # (n_nodes_d, fanout) totals of the branched children
    for depth in range(k - 2, -1, -1):
        logu = child_logu[depth]
        n_d = logu.shape[0]
        if child_logT is None:
            branch_T = np.zeros((n_d, fanout))
        else:
            branch_T = child_logT.reshape(n_d, fanout)
        # unbranched children carry the mean branched subtree total
        logTbar = logsumexp(branch_T, axis=1, keepdims=True) - math.log(fanout)
        logw = np.concatenate([
            logu[:, :fanout] + branch_T,
            logu[:, fanout:] + logTbar,
            (log_tail[depth] + logTbar[:, 0])[:, None],
        ], axis=1)
        descent_logw[depth] = logw
        child_logT = logsumexp(logw, axis=1)

    logv = np.zeros(1)
    for logu in child_logu:
        logv = (logv[:, None] + logu[:, :fanout]).ravel()
    leafw = np.exp(logv - logsumexp(logv))
    leafw /= leafw.sum()
    return CascadeTree(spec=spec, descent_logw=descent_logw, leaf_weights=leafw)


def sample_ensemble(spec: CascadeSpec, n_trees: int, seed: int) -> list[CascadeTree]:
    return [sample_cascade(spec, tree_rng(seed, t)) for t in range(n_trees)]


@dataclass(frozen=True)
class OverlapHistogram:
    masses: np.ndarray   # empirical mass per overlap level r = 1..k
    stderr: np.ndarray   # between-tree standard error
    target: np.ndarray   # m_r - m_{r-1}
    n_trees: int
    pairs_per_tree: int


def _pair_overlaps(tree: CascadeTree, n_pairs: int, rng: np.random.Generator
                   ) -> np.ndarray:
    """Overlap levels r(alpha^1, alpha^2) for weight-sampled leaf pairs.

    Pairs descend the subtree-weighted per-node distributions.  Agreement on
    an unbranched child of the last level is a shared leaf; at intermediate
    levels the remaining overlap is drawn from the conditional law
    (m_j - m_{j-1})/(1 - m_level), exact in ensemble expectation because the
    missing subtree is independent of everything sampled.  Both replicas in
    the aggregated Poisson remainder (probability below 1e-5 at the default
    oversample) are classified as split at that level.
    """
    spec = tree.spec
    k = spec.k
    r_out = np.full(n_pairs, k, dtype=np.int64)
    if k == 1:
        return r_out
    node = np.zeros(n_pairs, dtype=np.int64)
    active = np.ones(n_pairs, dtype=bool)
    for depth in range(k - 1):
        if not active.any():
            break
        idx_active = np.flatnonzero(active)
        n_act = len(idx_active)
        u1 = rng.random(n_act)
        u2 = rng.random(n_act)
        i1 = np.empty(n_act, dtype=np.int64)
        i2 = np.empty(n_act, dtype=np.int64)
        for n_id in np.unique(node[idx_active]):
            row = tree.descent_logw[depth][n_id]
            cw = np.cumsum(np.exp(row - row.max()))
            members = node[idx_active] == n_id
            i1[members] = np.searchsorted(cw, u1[members] * cw[-1], side="right")
            i2[members] = np.searchsorted(cw, u2[members] * cw[-1], side="right")
        phantom_col = tree.descent_logw[depth].shape[1] - 1
        np.minimum(i1, phantom_col, out=i1)
        np.minimum(i2, phantom_col, out=i2)
        last_level = depth == k - 2
        same = i1 == i2
        phantom = same & (i1 == phantom_col)
        branched = same & (i1 < spec.fanout) & ~phantom
        unbranched = same & ~phantom & ~branched
        split = ~same | phantom
        r_out[idx_active[split]] = depth + 1
        if last_level:
            # any shared child index at the final level is a shared leaf
            r_out[idx_active[branched | unbranched]] = k
            active[idx_active] = False
            continue
        if unbranched.any():
            levels = np.arange(depth + 2, k + 1)
            cond = np.diff(spec.m)[depth + 1:] / (1.0 - spec.m[depth + 1])
            draws = rng.choice(levels, size=int(unbranched.sum()), p=cond)
            r_out[idx_active[unbranched]] = draws
        node[idx_active[branched]] = node[idx_active[branched]] * spec.fanout + i1[branched]
        active[idx_active[~branched]] = False
    return r_out


def overlap_histogram(trees, samples: int, rng: np.random.Generator
                      ) -> OverlapHistogram:
    """Tabulate overlap levels of i.i.d. leaf pairs across a tree ensemble.

    ``samples`` pairs are split evenly over the trees; the standard error is
    taken across per-tree histograms, which is robust to the within-tree
    correlation of pairs sharing a weight realization.
    """
    if isinstance(trees, CascadeTree):
        trees = [trees]
    n_trees = len(trees)
    per_tree = max(1, samples // n_trees)
    k = trees[0].spec.k
    hists = np.zeros((n_trees, k))
    for t, tree in enumerate(trees):
        r = _pair_overlaps(tree, per_tree, rng)
        hists[t] = np.bincount(r - 1, minlength=k) / per_tree
    masses = hists.mean(axis=0)
    stderr = (hists.std(axis=0, ddof=1) / math.sqrt(n_trees)
              if n_trees > 1 else np.full(k, np.inf))
    return OverlapHistogram(masses=masses, stderr=stderr,
                            target=np.diff(trees[0].spec.m),
                            n_trees=n_trees, pairs_per_tree=per_tree)


# ---------------------------------------------------------------------------
# hierarchical expectation recursion


@dataclass(frozen=True)
class HierarchicalResult:
    value: float
    stderr: float
    method: str


def hierarchical_value(m, leaf, *, method: str = "mc", dim: int = 1,
                       n_nodes: int = 64, n_samples=512,
                       rng: np.random.Generator | None = None) -> HierarchicalResult:
    """Run the backward recursion for a leaf functional of z_0..z_{k-1}.

    ``leaf`` receives a list of k arrays, each broadcastable to a common
    shape with a trailing axis of length ``dim``, and must return the leaf
    values without the trailing axis.  Gauss-Hermite requires dim == 1.
    The Monte Carlo error estimate is the spread over outer-level samples,
    which carries the inner-level noise through the recursion.
    """
    m = np.atleast_1d(np.asarray(m, dtype=np.float64))
    k = len(m) - 1
    if k < 1:
        raise ValidationError("m must contain at least (0, 1)")
    if method in ("gauss-hermite", "gh"):
        if dim != 1:
            raise ValidationError("Gauss-Hermite recursion requires scalar levels")
        if n_nodes ** k > _MC_BUDGET:
            raise ValidationError("Gauss-Hermite grid too large; lower n_nodes or k")
        nodes, wts = np.polynomial.hermite_e.hermegauss(n_nodes)
        wts = wts / np.sqrt(2.0 * np.pi)
        logw = np.log(wts)
        zs = []
        for r in range(k):
            shape = [1] * (k + 1)
            shape[r] = n_nodes
            zs.append(nodes.reshape(shape))
        F = np.asarray(leaf(zs), dtype=np.float64)
        if not np.all(np.isfinite(F)):
            raise NumericalError("leaf functional produced non-finite values")
        F = np.broadcast_to(F, (n_nodes,) * k).copy()
        for r in range(k - 1, 0, -1):
            F = logsumexp(m[r] * F + logw, axis=-1) / m[r]
        value = float(np.sum(wts * F))
        return HierarchicalResult(value=value, stderr=0.0, method="gauss-hermite")

    if method != "mc":
        raise ValidationError(f"unknown method {method!r}")
    if rng is None:
        raise ValidationError("Monte Carlo recursion needs an rng")
    if np.isscalar(n_samples):
        n_samples = (int(n_samples),) * k
    n_samples = tuple(int(n) for n in n_samples)
    if len(n_samples) != k:
        raise ValidationError("need one sample count per level")
    inner_elems = int(np.prod(n_samples[1:], dtype=np.int64)) * dim
    chunk = max(1, _MC_BUDGET // max(inner_elems, 1))
    n0 = n_samples[0]
    outer_vals = np.empty(n0)
    pos = 0
    while pos < n0:
        c = min(chunk, n0 - pos)
        zs = [rng.standard_normal((c,) + (1,) * (k - 1) + (dim,))]
        for r in range(1, k):
            shape = (c,) + tuple(n_samples[1:r + 1]) + (1,) * (k - 1 - r) + (dim,)
            zs.append(rng.standard_normal(shape))
        F = np.asarray(leaf(zs), dtype=np.float64)
        if not np.all(np.isfinite(F)):
            raise NumericalError("leaf functional produced non-finite values")
        F = np.broadcast_to(F, (c,) + tuple(n_samples[1:])).copy()
        for r in range(k - 1, 0, -1):
            F = (logsumexp(m[r] * F, axis=-1) - math.log(n_samples[r])) / m[r]
        outer_vals[pos:pos + c] = F
        pos += c
    value = float(outer_vals.mean())
    stderr = float(outer_vals.std(ddof=1) / math.sqrt(n0)) if n0 > 1 else float("inf")
    return HierarchicalResult(value=value, stderr=stderr, method="mc")


# ---------------------------------------------------------------------------
# sphere integral (radial reduction of the single-coordinate tilt)


_latitude_cache: dict = {}


def _latitude_nodes(M: int, n_quad: int):
    key = (M, n_quad)
    if key not in _latitude_cache:
        x, w = np.polynomial.legendre.leggauss(n_quad)
        phi = 0.5 * np.pi * (x + 1.0)
        logw = np.log(w * 0.5 * np.pi) + (M - 2) * np.log(np.sin(phi))
        lognorm = logsumexp(logw)
        _latitude_cache[key] = (np.cos(phi), logw - lognorm)
    return _latitude_cache[key]


def log_sphere_integral(M: int, x, n_quad: int | None = None):
    """log of the normalized sphere integral of exp(<kappa, g>) on ||kappa||^2 = M,
    as a function of x = ||g||_2.

    Rotational invariance reduces it to the latitude density
    (1 - t^2)^{(M-3)/2} exp(sqrt(M) x t); evaluated with the substitution
    t = cos(phi) so the integrand stays smooth for every M >= 2, accumulated
    in log domain.  M = 1 is the two-point sphere: log cosh(x).
    """
    x = np.asarray(x, dtype=np.float64)
    if M < 1:
        raise ValidationError("sphere dimension must be >= 1")
    if M == 1:
        ax = np.abs(x)
        return ax + np.log1p(np.exp(-2.0 * ax)) - math.log(2.0)
    n_quad = n_quad or max(200, 2 * M)
    cosphi, logw = _latitude_nodes(M, n_quad)
    flat = np.atleast_1d(x).ravel()
    out = np.empty(flat.shape)
    step = max(1, _MC_BUDGET // n_quad)
    for i in range(0, len(flat), step):
        arg = math.sqrt(M) * flat[i:i + step, None] * cosphi[None, :] + logw[None, :]
        peak = arg.max(axis=1)
        np.exp(arg - peak[:, None], out=arg)
        out[i:i + step] = peak + np.log(arg.sum(axis=1))
    return out.reshape(x.shape) if x.ndim else float(out[0])


# ---------------------------------------------------------------------------
# finite-size functionals


def p2_value(model: MixedModel, pair: AdmissiblePair, M: int) -> float:
    """Closed form (M/2) sum_r m_r (w_{r+1} - w_r)."""
    lev = compute_levels(model, pair)
    return 0.5 * M * float(np.sum(lev.m[1:] * (lev.w[2:] - lev.w[1:-1])))


def p2_leaf(model: MixedModel, pair: AdmissiblePair, M: int):
    """Leaf functional whose recursion value equals p2_value."""
    lev = compute_levels(model, pair)
    k = lev.k
    dw = np.sqrt(np.maximum(lev.w[1:k + 1] - lev.w[0:k], 0.0))  # r = 0..k-1
    shift = 0.5 * M * (lev.w[k + 1] - lev.w[k])
    root_m = math.sqrt(M)

    def leaf(zs):
        acc = dw[0] * zs[0][..., 0]
        for r in range(1, k):
            acc = acc + dw[r] * zs[r][..., 0]
        return root_m * acc + shift

    return leaf


def p1_species_value(model: MixedModel, pair: AdmissiblePair, s, M_s: int, *,
                     method: str = "mc", n_samples=512, n_nodes: int = 64,
                     n_quad: int | None = None,
                     rng: np.random.Generator | None = None) -> HierarchicalResult:
    """Recursion value of the per-species sphere leaf at M_s cavity coordinates.

    The leaf is log of the sphere integral of exp(sum_j kappa_j g_j) plus the
    deterministic shift (M_s/2)(u_{k+1} - u_k); the integral depends on the
    Gaussians only through the norm of (sum_r eta_{j,r} sqrt(u_{r+1} - u_r))_j.
    """
    if M_s < 1:
        raise ValidationError("M_s must be >= 1")
    s_i = model.species_index(s)
    lev = compute_levels(model, pair)
    k = lev.k
    du = np.sqrt(np.maximum(lev.u[s_i, 1:k + 1] - lev.u[s_i, 0:k], 0.0))
    shift = 0.5 * M_s * (lev.u[s_i, k + 1] - lev.u[s_i, k])

    def leaf(zs):
        acc = du[0] * zs[0]
        for r in range(1, k):
            acc = acc + du[r] * zs[r]
        g = np.sqrt((acc ** 2).sum(axis=-1))
        return log_sphere_integral(M_s, g, n_quad) + shift

    return hierarchical_value(lev.m, leaf, method=method, dim=M_s,
                              n_nodes=n_nodes, n_samples=n_samples, rng=rng)


@dataclass(frozen=True)
class PmResult:
    value: float
    stderr: float
    M: int
    counts: np.ndarray
    p1: np.ndarray
    p1_stderr: np.ndarray
    p2: float


def species_split(lam, M: int) -> np.ndarray:
    """Split M coordinates over species proportionally to lam (largest
    remainder, every species gets at least one)."""
    lam = np.asarray(lam, dtype=np.float64)
    base = np.maximum(np.floor(lam * M).astype(np.int64), 1)
    while base.sum() > M:
        base[np.argmax(base)] -= 1
    frac = lam * M - base
    while base.sum() < M:
        j = int(np.argmax(frac))
        base[j] += 1
        frac[j] = -np.inf
    return base


def pm_over_m(model: MixedModel, pair: AdmissiblePair, M: int, counts=None, *,
              method: str = "mc", n_samples=512,
              rng: np.random.Generator | None = None) -> PmResult:
    """(sum_s p1_s - p2) / M with propagated Monte Carlo error bars.

    Converges to the variational value of (pair) as M grows with the species
    split tracking lam.
    """
    counts = species_split(model.lam, M) if counts is None else np.asarray(counts, dtype=np.int64)
    if counts.sum() != M:
        raise ValidationError("species counts must sum to M")
    p1_vals = np.empty(model.n_species)
    p1_errs = np.empty(model.n_species)
    for s in range(model.n_species):
        res = p1_species_value(model, pair, s, int(counts[s]),
                               method=method, n_samples=n_samples, rng=rng)
        p1_vals[s], p1_errs[s] = res.value, res.stderr
    p2 = p2_value(model, pair, M)
    value = (p1_vals.sum() - p2) / M
    stderr = float(np.sqrt(np.sum(p1_errs ** 2)) / M)
    return PmResult(value=value, stderr=stderr, M=M, counts=counts,
                    p1=p1_vals, p1_stderr=p1_errs, p2=p2)
