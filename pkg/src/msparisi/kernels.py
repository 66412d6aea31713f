"""Metropolis sweep kernels for the product-of-spheres sampler.

Two interchangeable implementations of the same move loop: a numba @njit
kernel and a pure-numpy fallback.  Selection: the environment variable
``MSPARISI_NUMBA=0`` forces the numpy path; if numba is not importable the
fallback is used automatically.  Randomness is pre-drawn by the caller, so
both paths consume the identical stream and produce identical trajectories
(bitwise for models up to degree 2, where both paths share the same
per-element arithmetic).

State layout: ``sigma`` is the configuration; ``h1`` the constant degree-1
field; ``S2``/``S3`` the symmetrized effective coupling tensors (including
beta and size scaling); ``f2 = 2 S2 sigma`` and ``f3`` the cached gradients
of the degree-2/3 energies.  A proposal rotates coordinates (i, j) of one
species by an angle, which preserves the sphere constraint exactly; the
energy change is evaluated from the caches plus low-rank corrections.
Caches and per-species norms are refreshed after every sweep.
"""

from __future__ import annotations

import math
import os

import numpy as np

_env = os.environ.get("MSPARISI_NUMBA", "1")
NUMBA_ENABLED = _env != "0"
if NUMBA_ENABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - exercised only without numba
        NUMBA_ENABLED = False

BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def _solve_b_loop(num0, d, du, out_b, out_resid):
    """Safeguarded Newton on the per-species derivative of the variational
    summand: 1 - 1/b - num0/(b-d_1)^2 - sum_r du_r/((b-d_{r+1})(b-d_r)).

    The derivative is increasing in b (strict convexity), diverges to -inf at
    d_1 whenever any numerator is positive, and tends to 1 at infinity, so an
    interior root always exists; species with all numerators zero have
    d_1 = 0 and the minimizer b = 1.
    """
    S = num0.shape[0]
    k = du.shape[1]
    for s in range(S):
        total = num0[s]
        for j in range(k):
            total += du[s, j]
        if total <= 0.0:
            out_b[s] = 1.0
            out_resid[s] = 0.0
            continue
        d1 = d[s, 1]

        def gp(b):
            acc = 1.0 - 1.0 / b - num0[s] / ((b - d1) * (b - d1))
            for j in range(k):
                acc -= du[s, j] / ((b - d[s, j + 2]) * (b - d[s, j + 1]))
            return acc

        def gpp(b):
            acc = 1.0 / (b * b) + 2.0 * num0[s] / ((b - d1) ** 3)
            for j in range(k):
                hi = b - d[s, j + 2]
                lo_ = b - d[s, j + 1]
                acc += du[s, j] * (hi + lo_) / (hi * hi * lo_ * lo_)
            return acc

        lo = d1 + 1e-10
        for _ in range(80):
            if gp(lo) < 0.0:
                break
            lo = d1 + (lo - d1) / 64.0
        hi = d1 + max(2.0, 2.0 * math.sqrt(total)) + 1.0
        for _ in range(200):
            if gp(hi) > 0.0:
                break
            hi = d1 + 2.0 * (hi - d1)
        b = 0.5 * (lo + hi)
        g = gp(b)
        for _ in range(200):
            if g < 0.0:
                lo = b
            elif g > 0.0:
                hi = b
            if abs(g) <= 1e-13 or hi - lo <= 1e-15 * max(1.0, hi):
                break
            cand = b - g / gpp(b)
            b = cand if (lo < cand < hi) else 0.5 * (lo + hi)
            g = gp(b)
        out_b[s] = b
        out_resid[s] = abs(g)
    return 0


if NUMBA_ENABLED:
    _solve_b_jit = njit(cache=True, fastmath=False)(_solve_b_loop)
else:
    _solve_b_jit = None


def solve_b(num0, d, du, backend: str | None = None):
    """Per-species minimizer of the b-summand; returns (b, |derivative|)."""
    num0 = np.ascontiguousarray(num0, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    du = np.ascontiguousarray(du, dtype=np.float64)
    b = np.empty(len(num0))
    resid = np.empty(len(num0))
    backend = backend or BACKEND
    impl = _solve_b_jit if (backend == "numba" and _solve_b_jit is not None) else _solve_b_loop
    impl(num0, d, du, b, resid)
    return b, resid


def _sweeps_py(sigma, h1, S2, S3, f2, f3, has_p1, has_p2, has_p3,
               sp_start, sp_size, sp_of, t, n_sweeps,
               prop_i, prop_ju, prop_ang, prop_u, energies):
    N = sigma.shape[0]
    n_acc = 0
    mv = 0
    for sweep in range(n_sweeps):
        for _step in range(N):
            i = prop_i[mv]
            s = sp_of[i]
            size = sp_size[s]
            if size < 2:
                mv += 1
                continue
            j = sp_start[s] + int(prop_ju[mv] * (size - 1))
            if j >= i:
                j += 1
            ang = prop_ang[mv]
            ca = math.cos(ang)
            sa = math.sin(ang)
            di = sigma[i] * (ca - 1.0) - sigma[j] * sa
            dj = sigma[i] * sa + sigma[j] * (ca - 1.0)
            dH = 0.0
            if has_p1:
                dH += h1[i] * di + h1[j] * dj
            if has_p2:
                dH += (f2[i] * di + f2[j] * dj
                       + S2[i, i] * di * di + 2.0 * S2[i, j] * di * dj
                       + S2[j, j] * dj * dj)
            if has_p3:
                pii = float(S3[:, i, i] @ sigma)
                pij = float(S3[:, i, j] @ sigma)
                pjj = float(S3[:, j, j] @ sigma)
                dH += (f3[i] * di + f3[j] * dj
                       + 3.0 * (pii * di * di + 2.0 * pij * di * dj + pjj * dj * dj)
                       + S3[i, i, i] * di ** 3 + 3.0 * S3[i, i, j] * di * di * dj
                       + 3.0 * S3[i, j, j] * di * dj * dj + S3[j, j, j] * dj ** 3)
            x = t * dH
            if x >= 0.0 or prop_u[mv] < math.exp(x):
                n_acc += 1
                if has_p2:
                    f2 += 2.0 * (S2[:, i] * di + S2[:, j] * dj)
                if has_p3:
                    vi = S3[:, i, :].T @ sigma
                    vj = S3[:, j, :].T @ sigma
                    f3 += 3.0 * (2.0 * di * vi + 2.0 * dj * vj
                                 + S3[i, i, :] * di * di
                                 + 2.0 * S3[i, j, :] * di * dj
                                 + S3[j, j, :] * dj * dj)
                sigma[i] += di
                sigma[j] += dj
            mv += 1
        for s in range(len(sp_size)):
            a = sp_start[s]
            b = a + sp_size[s]
            nrm = float(sigma[a:b] @ sigma[a:b])
            sigma[a:b] *= math.sqrt(sp_size[s] / nrm)
        H = 0.0
        if has_p1:
            H += float(h1 @ sigma)
        if has_p2:
            f2[:] = 2.0 * (S2 @ sigma)
            H += 0.5 * float(sigma @ f2)
        if has_p3:
            f3[:] = 3.0 * np.einsum("abc,a,b->c", S3, sigma, sigma)
            H += float(sigma @ f3) / 3.0
        energies[sweep] = H
    return n_acc


def _sweeps_loop(sigma, h1, S2, S3, f2, f3, has_p1, has_p2, has_p3,
                 sp_start, sp_size, sp_of, t, n_sweeps,
                 prop_i, prop_ju, prop_ang, prop_u, energies):
    N = sigma.shape[0]
    n_acc = 0
    mv = 0
    for sweep in range(n_sweeps):
        for _step in range(N):
            i = prop_i[mv]
            s = sp_of[i]
            size = sp_size[s]
            if size < 2:
                mv += 1
                continue
            j = sp_start[s] + int(prop_ju[mv] * (size - 1))
            if j >= i:
                j += 1
            ang = prop_ang[mv]
            ca = math.cos(ang)
            sa = math.sin(ang)
            di = sigma[i] * (ca - 1.0) - sigma[j] * sa
            dj = sigma[i] * sa + sigma[j] * (ca - 1.0)
            dH = 0.0
            if has_p1:
                dH += h1[i] * di + h1[j] * dj
            if has_p2:
                dH += (f2[i] * di + f2[j] * dj
                       + S2[i, i] * di * di + 2.0 * S2[i, j] * di * dj
                       + S2[j, j] * dj * dj)
            if has_p3:
                pii = 0.0
                pij = 0.0
                pjj = 0.0
                for a in range(N):
                    sl = sigma[a]
                    pii += S3[a, i, i] * sl
                    pij += S3[a, i, j] * sl
                    pjj += S3[a, j, j] * sl
                dH += (f3[i] * di + f3[j] * dj
                       + 3.0 * (pii * di * di + 2.0 * pij * di * dj + pjj * dj * dj)
                       + S3[i, i, i] * di ** 3 + 3.0 * S3[i, i, j] * di * di * dj
                       + 3.0 * S3[i, j, j] * di * dj * dj + S3[j, j, j] * dj ** 3)
            x = t * dH
            if x >= 0.0 or prop_u[mv] < math.exp(x):
                n_acc += 1
                if has_p2:
                    for a in range(N):
                        f2[a] += 2.0 * (S2[a, i] * di + S2[a, j] * dj)
                if has_p3:
                    for c in range(N):
                        vi = 0.0
                        vj = 0.0
                        for a in range(N):
                            vi += S3[a, i, c] * sigma[a]
                            vj += S3[a, j, c] * sigma[a]
                        f3[c] += 3.0 * (2.0 * di * vi + 2.0 * dj * vj
                                        + S3[i, i, c] * di * di
                                        + 2.0 * S3[i, j, c] * di * dj
                                        + S3[j, j, c] * dj * dj)
                sigma[i] += di
                sigma[j] += dj
            mv += 1
        for s in range(len(sp_size)):
            a = sp_start[s]
            b = a + sp_size[s]
            nrm = sigma[a:b] @ sigma[a:b]
            scale = math.sqrt(sp_size[s] / nrm)
            for c in range(a, b):
                sigma[c] *= scale
        H = 0.0
        if has_p1:
            H += float(h1 @ sigma)
        if has_p2:
            f2[:] = 2.0 * (S2 @ sigma)
            H += 0.5 * float(sigma @ f2)
        if has_p3:
            for c in range(N):
                acc = 0.0
                for a in range(N):
                    inner = 0.0
                    for bb in range(N):
                        inner += S3[a, bb, c] * sigma[bb]
                    acc += sigma[a] * inner
                f3[c] = 3.0 * acc
            H += float(sigma @ f3) / 3.0
        energies[sweep] = H
    return n_acc


if NUMBA_ENABLED:
    _sweeps_jit = njit(cache=True, fastmath=False)(_sweeps_loop)
else:
    _sweeps_jit = None


def run_sweeps(sigma, h1, S2, S3, f2, f3, has_p1, has_p2, has_p3,
               sp_start, sp_size, sp_of, t, n_sweeps, scale,
               rng: np.random.Generator, backend: str | None = None):
    """Run n_sweeps of N proposals each; returns (acceptance rate, energies).

    Mutates sigma/f2/f3 in place.  ``scale`` is the standard deviation of the
    rotation angle.  Randomness is drawn here in a fixed order so the two
    backends see the same proposals.
    """
    N = len(sigma)
    n_moves = n_sweeps * N
    prop_i = rng.integers(0, N, size=n_moves)
    prop_ju = rng.random(n_moves)
    prop_ang = scale * rng.standard_normal(n_moves)
    prop_u = rng.random(n_moves)
    energies = np.empty(n_sweeps)
    backend = backend or BACKEND
    impl = _sweeps_jit if (backend == "numba" and _sweeps_jit is not None) else _sweeps_py
    n_acc = impl(sigma, h1, S2, S3, f2, f3, has_p1, has_p2, has_p3,
                 sp_start, sp_size, sp_of, float(t), int(n_sweeps),
                 prop_i, prop_ju, prop_ang, prop_u, energies)
    return n_acc / max(n_moves, 1), energies
