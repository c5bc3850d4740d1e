"""Command line interface: ``tb <command> ...``.

Exit codes: 0 when every check passes, 2 when a check fails, 1 on a
configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import carleson, decoupling, estimator, haar
from .dyadic import GoodnessParams, bad_probability_mc
from .estimator import ConfigError, ExperimentConfig
from .kernel import DiscreteOperator, cauchy_kernel
from .measure import build_accretive, measure_from_json

EXIT_OK, EXIT_CONFIG, EXIT_FAIL = 0, 1, 2


def _emit(obj) -> None:
    print(json.dumps(estimator._clean(obj), indent=2, sort_keys=True))


def _load_json(path, field: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(field, f"file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(field, f"invalid JSON: {exc}") from None


def _config(args) -> ExperimentConfig:
    raw = _load_json(args.config, "config") if args.config else {"preset": args.preset}
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return ExperimentConfig.from_dict(raw)


def _pairing(cfg: ExperimentConfig):
    """Shared setup for expand and regimes (same draws as run_experiment)."""
    m, K, params = cfg.build()
    rng = np.random.default_rng(cfg.seed)
    window = estimator.default_window(m, cfg.levels)
    systems = estimator.draw_systems(m, window, rng, extra=cfg.shift_extra)
    b1 = build_accretive(cfg.b1.get("kind", "one"), m, rng, **{k: v for k, v in cfg.b1.items() if k != "kind"})
    b2 = build_accretive(cfg.b2.get("kind", "one"), m, rng, **{k: v for k, v in cfg.b2.items() if k != "kind"})
    mdim = int(cfg.X.get("m", 1))
    f = rng.normal(size=(m.n_atoms, mdim)) + 1j * rng.normal(size=(m.n_atoms, mdim))
    g = rng.normal(size=(m.n_atoms, mdim)) + 1j * rng.normal(size=(m.n_atoms, mdim))
    T = DiscreteOperator(K, m)
    res = estimator.expand_pairing(g, f, T, systems, b1, b2, window, params)
    return res, rng


def cmd_expand(args) -> int:
    cfg = _config(args)
    res, _ = _pairing(cfg)
    ok = res.rel_err <= 1e-8 and res.reconcile_err <= 1e-8
    _emit({"total": res.total, "direct": res.direct, "rel_err": res.rel_err,
           "reconcile_err": res.reconcile_err, "class_sums": res.class_sums(), "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_regimes(args) -> int:
    cfg = _config(args)
    res, rng = _pairing(cfg)
    rep = estimator.regime_norms(res, cfg.p, float(cfg.X.get("q", 2.0)), cfg.trials, rng)
    bound = -res.alpha / 2 * math.log(2) + 0.15
    ok = rep.reconcile_err <= 1e-8 and math.isfinite(rep.decay_slope) and rep.decay_slope <= bound
    _emit({"decay_slope": rep.decay_slope, "decay_slope_bound": bound, "decay_points": rep.decay_points,
           "contained_ratio": rep.contained_ratio, "contained_ratio_clear": rep.contained_ratio_clear,
           "cells": rep.cells_rows(), "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_badprob(args) -> int:
    try:
        p = GoodnessParams(alpha=args.alpha, d=args.d, r=args.r, skeleton=not args.boundary_only)
    except ValueError as exc:
        raise ConfigError("r" if "violates" in str(exc) else "goodness", str(exc)) from None
    res = bad_probability_mc(p, args.trials, args.seed, dim_n=args.N)
    limit = res["analytic_bound"] + 3 * res["stderr"]
    res["limit"] = limit
    res["pass"] = res["frequency"] <= limit
    _emit(res)
    return EXIT_OK if res["pass"] else EXIT_FAIL


def _measure_and_b(args, rng):
    spec = _load_json(args.measure, "measure") if args.measure else {"kind": "cantor", "ratio": 0.25,
                                                                     "depth": 4, "dim_n": 2}
    try:
        m = measure_from_json(spec)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("measure", str(exc)) from None
    bspec = _load_json(args.b, "b") if getattr(args, "b", None) else {"kind": "random_phase", "t": 0.5}
    try:
        b = build_accretive(bspec.get("kind", "one"), m, rng, **{k: v for k, v in bspec.items() if k != "kind"})
    except (TypeError, ValueError) as exc:
        raise ConfigError("b", str(exc)) from None
    return m, b


def cmd_haar_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    m, b = _measure_and_b(args, rng)
    window = estimator.default_window(m, args.levels) if args.levels else None
    bottom = estimator.resolving_bottom(m)
    top = window.top if window else bottom + 8
    systems = estimator.draw_systems(m, estimator.Window(bottom, top), rng)
    basis = haar.build_basis(m, systems.D, b, top, bottom)
    f = rng.normal(size=m.n_atoms) + 1j * rng.normal(size=m.n_atoms)
    rec = haar.reconstruct(haar.decompose(f, basis))
    err = float(np.linalg.norm(rec - f) / np.linalg.norm(f))
    ids = haar.haar_identity_errors(basis)
    ok = ids["max_abs_int_bphi"] <= 1e-12 and ids["max_rel_int_bphi2"] <= 1e-10 and err <= 1e-10 \
        and ids["min_subaccretive_margin"] >= -1e-12
    _emit({**ids, "reconstruction_rel_err": err, "n_functions": basis.size, "n_atoms": m.n_atoms, "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_paraproduct(args) -> int:
    rng = np.random.default_rng(args.seed)
    m, b1 = _measure_and_b(args, rng)
    b2 = build_accretive("random_phase", m, rng, t=0.5)
    bottom = estimator.resolving_bottom(m)
    window = estimator.Window(bottom, bottom + args.levels - 1)
    systems = estimator.draw_systems(m, window, rng)
    bq, br = estimator.build_bases(m, systems, b1, b2, window)
    g = rng.normal(size=(m.n_atoms, 1))
    tele = carleson.telescoping_check(g, bq, br, args.r)
    T = DiscreteOperator(cauchy_kernel(), m)
    pr = carleson.paraproduct_ratios(T, bq, br.tree, b2, args.r, args.trials, args.p, rng)
    ok = tele["rel_err"] <= 1e-10 and math.isfinite(pr["max"])
    _emit({"telescoping_rel_err": tele["rel_err"], "n_cubes": tele["n_cubes"], "bmo": pr["bmo"],
           "ratio_max": pr["max"], "ratio_min": pr["min"], "ratio_mean": pr["mean"], "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_jn_test(args) -> int:
    rng = np.random.default_rng(args.seed)
    inst = carleson.random_jn_instances(args.levels, args.trials, rng, m=args.m)
    res = carleson.jn_equivalence_test(inst, (1.0, 2.0))
    rows = [{"instance": r["instance"], "car1": r["norms"][1.0], "car2": r["norms"][2.0],
             "ratio": r["ratios"][2.0]} for r in res["rows"]]
    ok = all(math.isfinite(r["ratio"]) for r in rows)
    _emit({"max_ratio": res["max_ratio"][2.0], "mean_ratio": res["mean_ratio"][2.0], "rows": rows, "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_decouple(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.config:
        try:
            sysd = decoupling.partition_system_from_json(_load_json(args.config, "config"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from None
    else:
        filt = decoupling.random_cut_filtration(args.atoms, args.levels, rng)
        sysd = decoupling.random_partition_system(filt, args.m, rng)
    res = decoupling.tangent_equivalence(sysd, args.p, args.q, args.trials, rng)
    ok = all(math.isfinite(res[k]) for k in ("lhs", "rhs", "ratio"))
    _emit({**{k: res[k] for k in ("lhs", "rhs", "ratio", "stderr")}, "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_run(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    _, summary = estimator.run_experiment(cfg, args.out)
    print(f"finished in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    _emit({"assertions": summary["assertions"], "out": args.out})
    return EXIT_OK if all(summary["assertions"].values()) else EXIT_FAIL


def _add_config(p):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--preset", default="cantor-cauchy-small", choices=sorted(estimator.PRESETS),
                   help="preset used when no config is given")
    p.add_argument("--seed", type=int, default=None)


def _add_measure(p):
    p.add_argument("--measure", help="measure JSON (default: 256-atom planar Cantor set)")
    p.add_argument("--b", help="accretive function JSON (default: random phase, t = 0.5)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tb", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("expand", help="expand <g, Tf> and reconcile with the direct pairing")
    _add_config(p)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("regimes", help="per-regime cells, decay slope and contained ratios")
    _add_config(p)
    p.set_defaults(func=cmd_regimes)

    p = sub.add_parser("badprob", help="Monte Carlo bad-cube frequency against the analytic bound")
    p.add_argument("--N", type=int, default=1)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--d", type=float, default=1.0)
    p.add_argument("--r", type=int, default=32)
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--boundary-only", action="store_true", help="ignore the children of the large cube")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_badprob)

    p = sub.add_parser("paraproduct", help="telescoping identity and Pi_2 / BMO ratios")
    _add_measure(p)
    p.add_argument("--r", type=int, default=3)
    p.add_argument("--levels", type=int, default=8)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--p", type=float, default=2.0)
    p.set_defaults(func=cmd_paraproduct)

    p = sub.add_parser("haar-verify", help="Haar identities and exact reconstruction")
    _add_measure(p)
    p.add_argument("--levels", type=int, default=None)
    p.set_defaults(func=cmd_haar_verify)
    p = sub.add_parser("haar", help="Haar tools")
    hs = p.add_subparsers(dest="action", required=True)
    q = hs.add_parser("verify", help="same as haar-verify")
    _add_measure(q)
    q.add_argument("--levels", type=int, default=None)
    q.set_defaults(func=cmd_haar_verify)

    p = sub.add_parser("carleson", help="Carleson norm tools")
    cs = p.add_subparsers(dest="action", required=True)
    q = cs.add_parser("jn-test", help="Car^2 / Car^1 over random adapted sequences")
    q.add_argument("--levels", type=int, default=12)
    q.add_argument("--trials", type=int, default=100)
    q.add_argument("--m", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_jn_test)

    p = sub.add_parser("decouple", help="tangent decoupling")
    ds = p.add_subparsers(dest="action", required=True)
    q = ds.add_parser("tangent", help="both sides of the tangent equivalence")
    q.add_argument("--config", help="partition system JSON (labels, weights, terms_re, terms_im)")
    q.add_argument("--trials", type=int, default=64)
    q.add_argument("--p", type=float, default=2.0)
    q.add_argument("--q", type=float, default=2.0)
    q.add_argument("--atoms", type=int, default=256)
    q.add_argument("--levels", type=int, default=4)
    q.add_argument("--m", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_decouple)

    p = sub.add_parser("run", help="full experiment from a config; writes summary.json, cells.csv, decay.csv")
    _add_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
