"""Command-line entry point.

Subcommands: evaluate, minimize, cascade, simulate, compare, selftest.
Every command reads a config document (see config.py for the grammar),
writes CSV outputs plus one JSON run record into the output directory, and
prints a short summary.  Exit codes: 0 success, 2 validation error,
3 numerical failure, 4 refused by the convexity guard.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import admissible, cascade, parisi, simulate
from .config import (RunConfig, RunRecord, Stopwatch, fmt, join_seq,
                     load_config, write_csv)
from .errors import (ConvexityError, MemoryGuardError, NumericalError,
                     ValidationError)
from .model import SpeciesCounts, c_star, check_convexity, validate_model

WORKERS_ENV = "MSPARISI_WORKERS"


def _derive_seed(seed: int, *path) -> int:
    ss = np.random.SeedSequence([int(seed)] + [int(p) for p in path])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _require_valid(cfg: RunConfig, need_pair: bool) -> None:
    problems = validate_model(cfg.model)
    if problems:
        raise ValidationError("model: " + "; ".join(problems))
    if need_pair:
        if cfg.pair is None:
            raise ValidationError("this command needs a [pair] section")
        problems = admissible.validate_pair(cfg.model.lam, cfg.pair)
        if problems:
            raise ValidationError("pair: " + "; ".join(problems))


def run_evaluate(cfg: RunConfig, out: Path, seed, workers, tolerance) -> dict:
    _require_valid(cfg, need_pair=True)
    ev = parisi.inner_min_b(cfg.model, cfg.pair, h=cfg.field_h)
    labels = cfg.model.species
    write_csv(out / "evaluate.csv",
              ["value"] + [f"b_opt_{s}" for s in labels]
              + [f"residual_{s}" for s in labels] + [f"boundary_{s}" for s in labels],
              [[ev.value, *ev.b_opt, *ev.residuals, *ev.boundary]])
    rows = []
    for si, s in enumerate(labels):
        for r in range(ev.d_profile.shape[1]):
            rows.append([s, r + 1, ev.d_profile[si, r]])
    write_csv(out / "d_profile.csv", ["species", "r", "d"], rows)
    print(f"value = {fmt(ev.value)}")
    print("b_opt =", " ".join(fmt(b) for b in ev.b_opt))
    return {"value": ev.value, "files": ["evaluate.csv", "d_profile.csv"]}


def run_minimize(cfg: RunConfig, out: Path, seed, workers, tolerance) -> dict:
    _require_valid(cfg, need_pair=False)
    k_list = cfg.get_ints("k_list", default=[1])
    n_starts = cfg.get_int("n_starts", 16)
    rows = []
    extra = []
    prev_value = None
    best = None
    for k in k_list:
        res = parisi.minimize_parisi(cfg.model, k, h=cfg.field_h,
                                     seed=_derive_seed(seed, k),
                                     n_starts=n_starts, workers=workers,
                                     extra_starts=tuple(extra))
        extra = [res.pair]
        monotone_ok = prev_value is None or res.evaluation.value <= prev_value + tolerance
        prev_value = min(prev_value, res.evaluation.value) if prev_value is not None \
            else res.evaluation.value
        meas, sync = res.pair.measure, res.pair.map
        rows.append([cfg.config_hash[:12], k, res.evaluation.value,
                     join_seq(meas.m), join_seq(meas.q), join_seq(sync.knots),
                     join_seq(sync.values), join_seq(res.evaluation.b_opt),
                     float(res.evaluation.residuals.max()), monotone_ok,
                     res.report.n_evals])
        best = res
        print(f"k={k}: value = {res.evaluation.value!r} "
              f"(monotone_ok={monotone_ok}, evals={res.report.n_evals})")
    write_csv(out / "minimize.csv",
              ["model_hash", "k", "value", "m", "q", "phi_knots", "phi_values",
               "b_opt", "max_residual", "monotone_ok", "n_evals"], rows)
    return {"best_value": best.evaluation.value, "files": ["minimize.csv"]}


def run_cascade(cfg: RunConfig, out: Path, seed, workers, tolerance) -> dict:
    _require_valid(cfg, need_pair=True)
    m_seq = cfg.get_floats("cascade_m", default=cfg.pair.measure.m)
    fanout = cfg.get_int("fanout", 512)
    oversample = cfg.get_int("oversample", 8)
    n_trees = cfg.get_int("trees", 2000)
    samples = cfg.get_int("samples", 20 * n_trees)
    spec = cascade.CascadeSpec(m=m_seq, fanout=fanout, oversample=oversample)
    trees = cascade.sample_ensemble(spec, n_trees, _derive_seed(seed, 1))
    hist_rng = np.random.default_rng(_derive_seed(seed, 2))
    hist = cascade.overlap_histogram(trees, samples, hist_rng)
    rows = []
    for r in range(len(hist.masses)):
        z = ((hist.masses[r] - hist.target[r]) / hist.stderr[r]
             if hist.stderr[r] > 0 else 0.0)
        rows.append([r + 1, hist.masses[r], hist.stderr[r], hist.target[r], z])
    write_csv(out / "cascade_overlap.csv",
              ["r", "empirical", "stderr", "target", "z"], rows)

    m_list = cfg.get_ints("m_list", default=[16, 64])
    n_samples = cfg.get_int("mc_samples", 512)
    limit = parisi.parisi_value(cfg.model, cfg.pair, h=cfg.field_h)
    pm_rows = []
    for i, M in enumerate(m_list):
        rng = np.random.default_rng(_derive_seed(seed, 3, i))
        pm = cascade.pm_over_m(cfg.model, cfg.pair, M, n_samples=n_samples, rng=rng)
        pm_rows.append([M, pm.value, pm.stderr, limit, abs(pm.value - limit)])
        print(f"M={M}: pm/M = {fmt(pm.value)} +- {fmt(pm.stderr)} (limit {fmt(limit)})")
    write_csv(out / "pm_table.csv", ["M", "value", "stderr", "limit", "abs_gap"],
              pm_rows)
    return {"limit": limit, "files": ["cascade_overlap.csv", "pm_table.csv"]}


def run_simulate(cfg: RunConfig, out: Path, seed, workers, tolerance) -> dict:
    _require_valid(cfg, need_pair=cfg.params.get("k_list") is None)
    counts = SpeciesCounts(cfg.get_ints("n_per_species"))
    if len(counts.counts) != cfg.model.n_species:
        raise ValidationError("n_per_species needs one entry per species")
    t_nodes = cfg.get_int("t_nodes", 13)
    t_grid = np.linspace(0.0, 1.0, t_nodes)
    mc = simulate.free_energy_ti(
        cfg.model, counts, n_disorders=cfg.get_int("disorders", 8),
        t_grid=t_grid, sweeps_equil=cfg.get_int("sweeps_equil", 300),
        sweeps_measure=cfg.get_int("sweeps_measure", 500),
        seed=_derive_seed(seed, 10), workers=workers)
    rows = []
    ns = list(counts.counts)
    for i, t in enumerate(mc.t_grid):
        rows.append([seed, counts.total, *ns, t, mc.t_means[i], mc.t_stderr[i],
                     sum(mc.sweeps)])
    write_csv(out / "free_energy.csv",
              ["seed", "N"] + [f"N_{s}" for s in cfg.model.species]
              + ["t", "estimate", "stderr", "sweeps"], rows)
    print(f"free energy = {fmt(mc.value)} +- {fmt(mc.stderr)} "
          f"(equilibration_ok={mc.equilibration_ok})")

    if cfg.params.get("k_list") is not None:
        k_list = cfg.get_ints("k_list")
        extra = []
        best = None
        for k in k_list:
            res = parisi.minimize_parisi(cfg.model, k, h=cfg.field_h,
                                         seed=_derive_seed(seed, 20, k),
                                         workers=workers,
                                         extra_starts=tuple(extra))
            extra = [res.pair]
            best = res
        variational = best.evaluation
    else:
        variational = parisi.inner_min_b(cfg.model, cfg.pair, h=cfg.field_h)
    gap = simulate.guerra_gap(cfg.model, counts, mc, variational,
                              allowance=cfg.get_float("allowance", 0.05))
    write_csv(out / "guerra.csv",
              ["variational", "mc_value", "mc_stderr", "gap", "threshold", "ok"],
              [[variational.value, mc.value, mc.stderr, gap.gap, gap.threshold, gap.ok]])
    print(f"guerra gap = {fmt(gap.gap)} (ok={gap.ok})")

    chains = cfg.get_int("chains", 4)
    disorder = simulate.build_disorder(cfg.model, counts, _derive_seed(seed, 30))
    samples = simulate.overlap_stats(
        cfg.model, counts, disorder, cfg.get_float("overlap_t", 1.0), chains,
        sweeps_equil=cfg.get_int("sweeps_equil", 300),
        snapshots=cfg.get_int("snapshots", 50),
        thin=cfg.get_int("thin", 10), seed=_derive_seed(seed, 31))
    write_csv(out / "overlaps.csv",
              ["snapshot", "chain_1", "chain_2", "R"]
              + [f"R_{s}" for s in cfg.model.species], samples.pair_table())
    gg, scatter = simulate.overlap_diagnostics(samples, seed=_derive_seed(seed, 32))
    write_csv(out / "gg_diagnostics.csv",
              ["f_degree", "psi_degree", "observed", "null_mean", "null_std", "z"],
              [[g.f_degree, g.psi_degree, g.observed, g.null_mean, g.null_std, g.z]
               for g in gg])
    write_csv(out / "sync_scatter.csv",
              ["R"] + [f"R_{s}" for s in cfg.model.species]
              + [f"fit_{s}" for s in cfg.model.species],
              [[scatter.r[i], *scatter.rs[i], *scatter.fitted[i]]
               for i in range(len(scatter.r))])
    return {"mc_value": mc.value, "gap": gap.gap, "gap_ok": gap.ok,
            "files": ["free_energy.csv", "guerra.csv", "overlaps.csv",
                      "gg_diagnostics.csv", "sync_scatter.csv"]}


def run_compare(cfg: RunConfig, out: Path, seed, workers, tolerance) -> dict:
    _require_valid(cfg, need_pair=False)
    rows = []
    k_list = cfg.get_ints("k_list", default=[1, 2])
    extra = []
    results = []
    for k in k_list:
        res = parisi.minimize_parisi(cfg.model, k, h=cfg.field_h,
                                     seed=_derive_seed(seed, 40, k),
                                     workers=workers,
                                     extra_starts=tuple(extra))
        extra = [res.pair]
        results.append((k, res))
        rows.append([f"variational_k{k}", res.evaluation.value, 0.0, ""])
    best_k, best = results[-1]

    cs = c_star(cfg.model)
    rows.append(["c_star", cs, 0.0, ""])
    for (k1, r1), (k2, r2) in zip(results, results[1:]):
        dist = admissible.pseudometric_d(cfg.model.lam, r1.pair, r2.pair)
        lhs = abs(r1.evaluation.value - r2.evaluation.value)
        ok = lhs <= 0.5 * cs * dist + 1e-8
        rows.append([f"lipschitz_k{k1}_k{k2}_distance", dist, 0.0, ""])
        rows.append([f"lipschitz_k{k1}_k{k2}_lhs", lhs, 0.0, f"ok={ok}"])

    m_list = cfg.get_ints("m_list", default=[16, 64])
    for i, M in enumerate(m_list):
        rng = np.random.default_rng(_derive_seed(seed, 41, i))
        pm = cascade.pm_over_m(cfg.model, best.pair, M,
                               n_samples=cfg.get_int("mc_samples", 512), rng=rng)
        rows.append([f"pm_over_m_M{M}", pm.value, pm.stderr, ""])

    mc_value = None
    if cfg.params.get("n_per_species") is not None:
        counts = SpeciesCounts(cfg.get_ints("n_per_species"))
        t_grid = np.linspace(0.0, 1.0, cfg.get_int("t_nodes", 13))
        mc = simulate.free_energy_ti(
            cfg.model, counts, n_disorders=cfg.get_int("disorders", 8),
            t_grid=t_grid, sweeps_equil=cfg.get_int("sweeps_equil", 300),
            sweeps_measure=cfg.get_int("sweeps_measure", 500),
            seed=_derive_seed(seed, 42), workers=workers)
        mc_value = mc.value
        rows.append(["mc_estimate", mc.value, mc.stderr, ""])
        gap = simulate.guerra_gap(cfg.model, counts, mc, best.evaluation,
                                  allowance=cfg.get_float("allowance", 0.05))
        rows.append(["guerra_gap", gap.gap, 0.0, f"ok={gap.ok}"])

    write_csv(out / "compare.csv", ["quantity", "value", "stderr", "note"], rows)
    for row in rows:
        print(f"{row[0]}: {fmt(row[1])}" + (f" +- {fmt(row[2])}" if row[2] else ""))
    return {"best_variational": best.evaluation.value, "best_k": best_k,
            "mc_value": mc_value, "files": ["compare.csv"]}


def run_selftest(cfg, out: Path, seed, workers, tolerance) -> dict:
    """Fast end-to-end battery; each line is one check."""
    from .model import make_model, xi
    from .admissible import dirac, identity_map, quantile

    checks = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        print(f"{'PASS' if ok else 'FAIL'}  {name}")

    m1 = make_model(["a"], [1.0], [(2, 1.0, 1.0)])
    check("single-species model validates", not validate_model(m1))
    check("xi(0.5) = 0.25", abs(xi(m1, [0.5]) - 0.25) < 1e-15)
    pair0 = admissible.AdmissiblePair(measure=dirac(0.0), map=identity_map(1))
    ev = parisi.inner_min_b(m1, pair0)
    check("annealed value = xi(1)/2", abs(ev.value - 0.5) < 1e-9)
    check("annealed b_opt = 1 + xi_s(1)", abs(ev.b_opt[0] - 3.0) < 1e-8)
    check("quantile of dirac", quantile(dirac(0.5), 0.7) == 0.5)
    check("convexity guard flags bipartite", not check_convexity(
        make_model(["a", "b"], [0.5, 0.5],
                   [(2, 1.0, {("a", "b"): 1.0, ("b", "a"): 1.0})])).ok)
    spec = cascade.CascadeSpec(m=[0.0, 0.5, 1.0], fanout=128)
    trees = cascade.sample_ensemble(spec, 200, seed or 0)
    hist = cascade.overlap_histogram(trees, 4000, np.random.default_rng(1))
    z = np.abs((hist.masses - hist.target) / hist.stderr)
    check("cascade overlap law within 4 sigma", np.all(z < 4.0))
    counts = SpeciesCounts([12])
    rep = simulate.covariance_selftest(m1, counts, trials=4000, pairs=4, seed=3)
    check("hamiltonian covariance within 4 sigma", rep.ok)
    ok_all = all(ok for _, ok in checks)
    if not ok_all:
        raise NumericalError("selftest failed: "
                             + ", ".join(n for n, ok in checks if not ok))
    return {"checks": len(checks)}


RUNNERS = {
    "evaluate": run_evaluate,
    "minimize": run_minimize,
    "cascade": run_cascade,
    "simulate": run_simulate,
    "compare": run_compare,
    "selftest": run_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msparisi",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand")
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="run configuration document")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--tolerance", type=float, default=1e-9)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not args.subcommand:
        build_parser().print_help()
        return 2
    try:
        if args.subcommand == "selftest" and args.config is None:
            cfg = None
            command = "selftest"
            seed = args.seed if args.seed is not None else 0
        else:
            if args.config is None:
                raise ValidationError("--config is required")
            cfg = load_config(args.config)
            if cfg.command != args.subcommand:
                raise ValidationError(
                    f"config names command {cfg.command!r}, invoked {args.subcommand!r}")
            command = cfg.command
            seed = args.seed
            if seed is None and "seed" in cfg.params:
                seed = int(cfg.params["seed"])
            if seed is None and command != "evaluate":
                raise ValidationError("randomized commands require an explicit seed")
        workers = args.workers
        env_workers = os.environ.get(WORKERS_ENV)
        if env_workers is not None:
            workers = int(env_workers)
            print(f"worker count {workers} taken from {WORKERS_ENV}", file=sys.stderr)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with Stopwatch() as timer:
            outputs = RUNNERS[command](cfg, out, seed, workers, args.tolerance)
        record = RunRecord(
            config_hash=cfg.config_hash if cfg else "selftest",
            command=command, seed=seed, workers=workers,
            config_text=cfg.raw_bytes.decode("utf-8", "replace") if cfg else "",
            outputs=outputs, wall_time_s=timer.elapsed)
        record.save(out / "record.json")
        return 0
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except ConvexityError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, MemoryGuardError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
