"""Multi-species mixed p-spin models and their covariance polynomials.

A model is a finite list of interaction terms.  Term ``(p, beta_p, D2_p)``
contributes ``beta_p^2 * sum_{s_vec} D2_p[s_vec] * prod_j lam[s_j] q[s_j]``
to the covariance polynomial

    xi(q) = sum_p beta_p^2 sum_{s_vec in S^p} D2_p[s_vec] lam^{s_vec} q^{s_vec},

where ``lam`` are the species weights.  Derived quantities:

    xi_s(q)  = (1/lam^s) d xi / d q^s          (per-species derivative)
    theta(q) = q . grad xi(q) - xi(q)          (Legendre-type remainder)

All three are polynomials with nonnegative coefficients on [0,1]^S, hence
coordinatewise nondecreasing there.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SPARSE_P_THRESHOLD = 4  # tensors with p above this are stored as coordinate dicts


@dataclass(frozen=True)
class InteractionTerm:
    """One degree-p interaction: coefficient beta and tensor Delta^2 of
    shape (S,)*p.  Dense ndarray for p <= 4, dict {index tuple: value}
    above that (|S|^p blow-up)."""

    p: int
    beta: float
    delta_sq: object  # np.ndarray or dict[tuple[int, ...], float]

    def dense(self) -> bool:
        return isinstance(self.delta_sq, np.ndarray)

    def entries(self):
        """Iterate (index_tuple, value) over stored entries."""
        if self.dense():
            arr = self.delta_sq
            for idx in itertools.product(*(range(n) for n in arr.shape)):
                yield idx, float(arr[idx])
        else:
            yield from self.delta_sq.items()

    def max_entry(self) -> float:
        if self.dense():
            return float(np.max(np.abs(self.delta_sq))) if self.delta_sq.size else 0.0
        return max((abs(v) for v in self.delta_sq.values()), default=0.0)


@dataclass(frozen=True)
class MixedModel:
    species: tuple[str, ...]
    lam: np.ndarray              # per-species weight, shape (S,)
    terms: tuple[InteractionTerm, ...]
    epsilon_decay: float = 1.0   # witness for the summability condition on beta

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=np.float64))
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.lam.shape != (len(self.species),):
            raise ValidationError("lam must have one entry per species")

    @property
    def n_species(self) -> int:
        return len(self.species)

    def content_key(self) -> tuple:
        """Hashable fingerprint of the model parameters."""
        terms = []
        for t in self.terms:
            if t.dense():
                terms.append((t.p, t.beta, t.delta_sq.tobytes()))
            else:
                terms.append((t.p, t.beta, tuple(sorted(t.delta_sq.items()))))
        return (self.species, self.lam.tobytes(), tuple(terms))

    def species_index(self, s) -> int:
        if isinstance(s, str):
            try:
                return self.species.index(s)
            except ValueError:
                raise ValidationError(f"unknown species label {s!r}") from None
        i = int(s)
        if not 0 <= i < self.n_species:
            raise ValidationError(f"species index {i} out of range")
        return i

    def max_p(self) -> int:
        return max((t.p for t in self.terms), default=0)


@dataclass(frozen=True)
class SpeciesCounts:
    """Finite-size coordinate allocation N^s per species."""

    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if self.counts.ndim != 1 or np.any(self.counts < 1):
            raise ValidationError("species counts must be positive integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def lam_n(self) -> np.ndarray:
        """Empirical proportions N^s / N."""
        return self.counts / self.total


def make_model(species, lam, terms, epsilon_decay=1.0) -> MixedModel:
    """Build a MixedModel from (p, beta, tensor) triples.

    ``tensor`` may be an ndarray of shape (S,)*p, a nested list, a scalar
    (broadcast to all entries), or a dict of (index tuple -> value) with
    string or integer indices.  Unspecified sparse entries are zero.
    """
    species = tuple(species)
    S = len(species)
    label_to_i = {s: i for i, s in enumerate(species)}
    built = []
    for p, beta, tensor in terms:
        p = int(p)
        if isinstance(tensor, dict):
            entries = {}
            for key, val in tensor.items():
                idx = tuple(label_to_i[k] if isinstance(k, str) else int(k) for k in key)
                if len(idx) != p:
                    raise ValidationError(f"tensor index {key} has wrong arity for p={p}")
                entries[idx] = float(val)
            if p <= SPARSE_P_THRESHOLD:
                arr = np.zeros((S,) * p)
                for idx, val in entries.items():
                    arr[idx] = val
                tensor = arr
            else:
                tensor = entries
        else:
            tensor = np.asarray(tensor, dtype=np.float64)
            if tensor.ndim == 0:
                tensor = np.full((S,) * p, float(tensor))
            if tensor.shape != (S,) * p:
                raise ValidationError(f"tensor for p={p} must have shape {(S,) * p}")
        built.append(InteractionTerm(p=p, beta=float(beta), delta_sq=tensor))
    return MixedModel(species=species, lam=lam, terms=tuple(built),
                      epsilon_decay=float(epsilon_decay))


# ---------------------------------------------------------------------------
# tensor contractions


def _contract_full(term: InteractionTerm, w: np.ndarray) -> float:
    """sum_{s_vec} Delta2[s_vec] * prod_j w[s_j]."""
    if term.dense():
        val = term.delta_sq
        for _ in range(term.p):
            val = np.tensordot(val, w, axes=([-1], [0]))
        return float(val)
    return float(sum(v * np.prod(w[list(idx)]) for idx, v in term.delta_sq.items()))


def _contract_keep1(term: InteractionTerm, w: np.ndarray) -> np.ndarray:
    """Vector over s of sum_{t_vec} Delta2[(t_vec, s)] * prod_j w[t_j].

    Relies on permutation symmetry: contracts all axes but the last.
    """
    S = w.shape[0]
    if term.p == 0:
        return np.zeros(S)
    if term.dense():
        val = term.delta_sq
        for _ in range(term.p - 1):
            val = np.tensordot(val, w, axes=([0], [0]))
        return np.asarray(val, dtype=np.float64)
    out = np.zeros(S)
    for idx, v in term.delta_sq.items():
        out[idx[-1]] += v * np.prod(w[list(idx[:-1])])
    return out


def _contract_keep2(term: InteractionTerm, w: np.ndarray) -> np.ndarray:
    """Matrix over (s, s') of sum_{u_vec} Delta2[(u_vec, s, s')] prod w[u_j]."""
    S = w.shape[0]
    if term.p < 2:
        return np.zeros((S, S))
    if term.dense():
        val = term.delta_sq
        for _ in range(term.p - 2):
            val = np.tensordot(val, w, axes=([0], [0]))
        return np.asarray(val, dtype=np.float64)
    out = np.zeros((S, S))
    for idx, v in term.delta_sq.items():
        out[idx[-2], idx[-1]] += v * np.prod(w[list(idx[:-2])])
    return out


_AXES = "abcdefgh"


def _contract_batch(term: InteractionTerm, W: np.ndarray, keep: int) -> np.ndarray:
    """Batched contraction over points: W has shape (S, n).

    keep=0 -> (n,): full contraction; keep=1 -> (S, n): last axis free;
    keep=2 -> (S, S, n): last two axes free.  Uses permutation symmetry.
    """
    S, n = W.shape
    p = term.p
    if p < keep:
        return np.zeros((S,) * keep + (n,))
    if term.dense():
        contracted = p - keep
        if contracted == 0:
            return np.broadcast_to(term.delta_sq[..., None], (S,) * keep + (n,)).copy()
        letters = _AXES[:p]
        ops = [letters] + [letters[i] + "n" for i in range(contracted)]
        out = letters[contracted:] + "n"
        args = [term.delta_sq] + [W] * contracted
        return np.einsum(",".join(ops) + "->" + out, *args)
    out = np.zeros((S,) * keep + (n,))
    for idx, v in term.delta_sq.items():
        prod = np.full(n, v)
        for i in idx[:p - keep]:
            prod = prod * W[i]
        out[idx[p - keep:]] += prod
    return out


def xi_s_batch(model: MixedModel, Q: np.ndarray) -> np.ndarray:
    """xi_s at many points at once; Q has shape (S, n), result (S, n)."""
    W = model.lam[:, None] * Q
    out = np.zeros_like(Q)
    for t in model.terms:
        out += t.p * t.beta ** 2 * _contract_batch(t, W, keep=1)
    return out


def theta_batch(model: MixedModel, Q: np.ndarray) -> np.ndarray:
    W = model.lam[:, None] * Q
    out = np.zeros(Q.shape[1])
    for t in model.terms:
        out += (t.p - 1) * t.beta ** 2 * _contract_batch(t, W, keep=0)
    return out


def xi_s_jacobian_batch(model: MixedModel, Q: np.ndarray) -> np.ndarray:
    """d xi_s / d q^t at many points: shape (S, S, n) indexed (s, t, n)."""
    W = model.lam[:, None] * Q
    out = np.zeros((model.n_species, model.n_species, Q.shape[1]))
    for t in model.terms:
        if t.p >= 2:
            out += t.p * (t.p - 1) * t.beta ** 2 * _contract_batch(t, W, keep=2)
    return out * model.lam[None, :, None]


def _check_q(model: MixedModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.n_species,):
        raise ValidationError(f"q must have shape ({model.n_species},)")
    if np.any(np.abs(q) > 1.0 + 1e-12):
        raise ValidationError("q components must lie in [-1, 1]")
    return q


# ---------------------------------------------------------------------------
# operations


def validate_model(model: MixedModel) -> list[str]:
    """Return a list of invariant violations (empty list means valid)."""
    violations = []
    lam_sum = float(model.lam.sum())
    if abs(lam_sum - 1.0) > 1e-9:
        violations.append(f"weights sum to {lam_sum:.10g} != 1")
    for i, l in enumerate(model.lam):
        if not 0.0 < l <= 1.0:
            violations.append(f"weight for species {model.species[i]!r} is {l:.6g}, not in (0, 1]")
    if not model.epsilon_decay > 0.0:
        violations.append(f"epsilon_decay must be positive, got {model.epsilon_decay:.6g}")
    for ti, term in enumerate(model.terms):
        if term.p < 1:
            violations.append(f"term {ti}: p must be >= 1, got {term.p}")
            continue
        if term.beta < 0:
            violations.append(f"term {ti}: beta must be >= 0, got {term.beta:.6g}")
        violations.extend(_tensor_violations(model, ti, term))
    # summability witness: finite term lists always converge, but the stored
    # epsilon must produce a finite sum (it does whenever entries are finite)
    budget = sum(t.beta ** 2 * t.max_entry() * (1.0 + model.epsilon_decay) ** t.p
                 for t in model.terms)
    if not np.isfinite(budget):
        violations.append("decay-condition sum is not finite")
    return violations


def _tensor_violations(model: MixedModel, ti: int, term: InteractionTerm) -> list[str]:
    out = []
    labels = model.species
    if term.dense():
        arr = term.delta_sq
        if np.any(arr < 0):
            idx = tuple(int(v) for v in np.argwhere(arr < 0)[0])
            out.append(f"term {ti}: negative tensor entry at {_fmt_idx(labels, idx)}")
        for axes in itertools.permutations(range(term.p)):
            if axes == tuple(range(term.p)):
                continue
            diff = np.abs(arr - np.transpose(arr, axes))
            if np.max(diff, initial=0.0) > 1e-12 * max(1.0, term.max_entry()):
                idx = tuple(int(v) for v in np.argwhere(diff > 1e-12 * max(1.0, term.max_entry()))[0])
                out.append(f"term {ti}: tensor not symmetric at {_fmt_idx(labels, idx)}")
                break
    else:
        tol = 1e-12 * max(1.0, term.max_entry())
        for idx, v in term.delta_sq.items():
            if v < 0:
                out.append(f"term {ti}: negative tensor entry at {_fmt_idx(labels, idx)}")
            for perm in itertools.permutations(idx):
                if abs(term.delta_sq.get(perm, 0.0) - v) > tol:
                    out.append(f"term {ti}: tensor not symmetric at {_fmt_idx(labels, idx)}")
                    break
            else:
                continue
            break
    return out


def _fmt_idx(labels, idx):
    return "(" + ", ".join(labels[i] for i in idx) + ")"


def xi(model: MixedModel, q) -> float:
    """Covariance polynomial at overlap vector q, using limiting weights."""
    q = _check_q(model, q)
    w = model.lam * q
    return sum(t.beta ** 2 * _contract_full(t, w) for t in model.terms)


def xi_finite_n(model: MixedModel, counts: SpeciesCounts, q) -> float:
    """Same polynomial with empirical proportions N^s/N in place of lam."""
    q = _check_q(model, q)
    w = counts.lam_n * q
    return sum(t.beta ** 2 * _contract_full(t, w) for t in model.terms)


def xi_s_all(model: MixedModel, q) -> np.ndarray:
    """Vector of (1/lam^s) d xi/d q^s over all species."""
    q = _check_q(model, q)
    w = model.lam * q
    out = np.zeros(model.n_species)
    for t in model.terms:
        out += t.p * t.beta ** 2 * _contract_keep1(t, w)
    return out


def xi_s(model: MixedModel, s, q) -> float:
    return float(xi_s_all(model, q)[model.species_index(s)])


def theta(model: MixedModel, q) -> float:
    """q . grad xi(q) - xi(q); degree-p terms pick up a factor (p - 1)."""
    q = _check_q(model, q)
    w = model.lam * q
    return sum((t.p - 1) * t.beta ** 2 * _contract_full(t, w) for t in model.terms)


def xi_derivatives(model: MixedModel, q) -> tuple[np.ndarray, np.ndarray]:
    """Exact polynomial gradient and Hessian of xi at q."""
    q = _check_q(model, q)
    w = model.lam * q
    grad = model.lam * xi_s_all(model, q)
    hess = np.zeros((model.n_species, model.n_species))
    for t in model.terms:
        if t.p >= 2:
            hess += t.p * (t.p - 1) * t.beta ** 2 * _contract_keep2(t, w)
    hess *= np.outer(model.lam, model.lam)
    return grad, hess


@dataclass(frozen=True)
class ConvexityReport:
    ok: bool
    worst_point: np.ndarray
    min_eigenvalue: float


def check_convexity(model: MixedModel, grid_resolution: int = 21,
                    random_points: int = 100_000, seed: int = 0) -> ConvexityReport:
    """Smallest Hessian eigenvalue of xi over [0,1]^S.

    Dense grid for up to three species, random sampling above that.
    Tolerance -1e-10 absorbs roundoff in the eigensolve.
    """
    if grid_resolution < 2:
        raise ValidationError("grid_resolution must be >= 2")
    S = model.n_species
    axis = np.linspace(0.0, 1.0, grid_resolution)
    if S <= 3:
        pts = np.array(list(itertools.product(axis, repeat=S)))
    else:
        pts = np.random.default_rng(seed).random((random_points, S))
    worst_eig = np.inf
    worst_pt = pts[0]
    for pt in pts:
        _, hess = xi_derivatives(model, pt)
        eig = float(np.linalg.eigvalsh(hess)[0])
        if eig < worst_eig:
            worst_eig = eig
            worst_pt = pt
    return ConvexityReport(ok=worst_eig >= -1e-10, worst_point=np.asarray(worst_pt),
                           min_eigenvalue=worst_eig)


def c_star(model: MixedModel) -> float:
    """sup over (s, s') of d xi_s / d q^{s'} at the all-ones vector."""
    ones = np.ones(model.n_species)
    _, hess = xi_derivatives(model, ones)
    if model.n_species == 0 or not model.terms:
        return 0.0
    return float(np.max(hess / model.lam[:, None]))
