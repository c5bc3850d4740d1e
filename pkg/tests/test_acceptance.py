"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import json
import math
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from tbkit import carleson, decoupling, estimator
from tbkit.dyadic import GoodnessParams, bad_probability_mc, containment_sweep, separation_sweep
from tbkit.haar import build_basis, decompose, haar_identity_errors, reconstruct
from tbkit.kernel import DiscreteOperator, cauchy_kernel
from tbkit.measure import build_accretive, cantor, graph_arclength, lebesgue_grid

MARGIN_TOL = 1e-12


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{name}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _random_measure(rng):
    kind = rng.choice(["cantor", "lebesgue", "graph"])
    if kind == "cantor":
        return cantor(0.25, int(rng.integers(4, 7)), 2)
    if kind == "lebesgue":
        return lebesgue_grid(2, int(rng.choice([16, 32, 64])))
    return graph_arclength("abs", int(rng.integers(256, 4097)))


def _random_b(m, rng):
    kind = rng.choice(["one", "plane_wave", "random_phase"])
    if kind == "plane_wave":
        return build_accretive("plane_wave", m, omega=list(rng.uniform(-0.6, 0.6, m.dim_n)))
    return build_accretive(kind, m, rng, t=float(rng.uniform(0, 1.2)))


@pytest.fixture(scope="module")
def triples():
    """Ten random (measure, b, f) triples with their bases, built once for criteria 1 and 2."""
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    out = []
    for _ in range(10):
        m = _random_measure(rng)
        b = _random_b(m, rng)
        window = estimator.default_window(m, int(rng.integers(6, 13)))
        systems = estimator.draw_systems(m, window, rng)
        basis = build_basis(m, systems.D, b, window.top, window.bottom)
        f = rng.normal(size=(m.n_atoms, 2)) + 1j * rng.normal(size=(m.n_atoms, 2))
        rec = reconstruct(decompose(f, basis))
        err = float(np.linalg.norm(rec - f) / np.linalg.norm(f))
        out.append({"m": m, "b": b, "basis": basis, "err": err})
    return out, time.perf_counter() - t0


def test_c01_reconstruction(triples):
    rows, elapsed = triples
    worst = max(r["err"] for r in rows)
    atoms = [r["m"].n_atoms for r in rows]
    ok = worst <= 1e-10 and elapsed <= 30 and min(atoms) >= 256 and max(atoms) <= 4096
    report("criterion 1 (Haar reconstruction)", ok,
           f"max rel err {worst:.2e} over 10 triples, atoms {min(atoms)}..{max(atoms)}, {elapsed:.1f} s")


def test_c02_haar_identities(triples):
    rows, _ = triples
    errs = [haar_identity_errors(r["basis"]) for r in rows]
    first = max(e["max_abs_int_bphi"] for e in errs)
    second = max(e["max_rel_int_bphi2"] for e in errs)
    # min_margin is the smallest subaccretive margin over every chain of the basis
    violations = sum(int(r["basis"].min_margin < -MARGIN_TOL) for r in rows)
    ok = first <= 1e-12 and second <= 1e-10 and violations == 0
    report("criterion 2 (Haar identities)", ok,
           f"max |int b phi| {first:.2e}, max rel |int b phi^2 - 1| {second:.2e}, "
           f"{violations} bases with subaccretive violations, {sum(e['n_cancellative'] for e in errs)} functions")


def test_c03_bad_probability():
    t0 = time.perf_counter()
    res = bad_probability_mc(GoodnessParams(alpha=1.0, d=1.0, r=32), 100000, rng=0, dim_n=1)
    elapsed = time.perf_counter() - t0
    limit = res["analytic_bound"] + 3 * res["stderr"]
    ok = res["frequency"] <= limit and elapsed <= 60
    report("criterion 3 (bad-cube probability)", ok,
           f"frequency {res['frequency']:.5f} vs bound {res['analytic_bound']:.5f} + 3 sigma = {limit:.5f}, "
           f"{elapsed:.1f} s")


def test_c04_good_cube_geometry():
    p = GoodnessParams(r=16)
    sep = separation_sweep(p, draws=1000, rng=0)
    cont = containment_sweep(p, pairs=10000, rng=1)
    ok = sep["good_cubes"] > 0 and sep["violations"] == 0 and cont["eligible"] >= 10000 and cont["violations"] == 0
    report("criterion 4 (good-cube geometry)", ok,
           f"separation {100 * sep['fraction_ok']:.1f}% over {sep['good_cubes']} good cubes "
           f"({sep['pairs_checked']} pairs), containment {cont['violations']} violations "
           f"in {cont['eligible']} pairs")


@pytest.fixture(scope="module")
def preset_runs(tmp_path_factory):
    """Two runs of the reference preset through the command line."""
    exe = shutil.which("tb")
    cmd = [exe] if exe else [sys.executable, "-m", "tbkit.cli"]
    runs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"preset_{name}")
        t0 = time.perf_counter()
        proc = subprocess.run(cmd + ["run", "--preset", "cantor-cauchy", "--seed", "7", "--out", str(out)],
                              capture_output=True, text=True)
        runs.append({"out": out, "code": proc.returncode, "time": time.perf_counter() - t0,
                     "stderr": proc.stderr})
    return runs


def test_c05a_separated_decay(preset_runs):
    s = json.loads((preset_runs[0]["out"] / "summary.json").read_text())
    ok = s["decay_slope"] <= s["decay_slope_bound"]
    report("criterion 5a (separated decay)", ok,
           f"slope {s['decay_slope']:.4f} vs bound {s['decay_slope_bound']:.4f} on {s['n_atoms']} atoms")


def test_c05b_contained_refinement():
    res = estimator.contained_refinement_sweep()
    finite = all(math.isfinite(x) for x in res["sup_all"])
    ok = finite and all(g < 1.2 for g in res["growth_all"])
    report("criterion 5b (contained ratios under refinement)", ok,
           f"depths {res['depths']}, sup {[round(x, 4) for x in res['sup_all']]}, "
           f"growth {[round(x, 4) for x in res['growth_all']]}; "
           f"skeleton-clear sup {[round(x, 4) for x in res['sup_clear']]}")


def test_c06_expansion_reconciles(preset_runs):
    s = json.loads((preset_runs[0]["out"] / "summary.json").read_text())
    rel, rec = [s["rel_err"]], [s["reconcile_err"]]
    rng = np.random.default_rng(6)
    for _ in range(5):
        m = _random_measure(rng)
        if m.n_atoms > 1024:
            m = cantor(0.25, 5, 2)
        b1, b2 = _random_b(m, rng), _random_b(m, rng)
        window = estimator.default_window(m, 8)
        systems = estimator.draw_systems(m, window, rng)
        f = rng.normal(size=m.n_atoms) + 1j * rng.normal(size=m.n_atoms)
        g = rng.normal(size=m.n_atoms) + 1j * rng.normal(size=m.n_atoms)
        res = estimator.expand_pairing(g, f, DiscreteOperator(cauchy_kernel(), m), systems, b1, b2, window,
                                       GoodnessParams(r=3))
        rel.append(res.rel_err)
        rec.append(res.reconcile_err)
    ok = max(rel) <= 1e-8 and max(rec) <= 1e-8
    report("criterion 6 (expansion reconciles)", ok,
           f"max rel err {max(rel):.2e}, max cell reconcile err {max(rec):.2e} over {len(rel)} pairings")


def test_c07_norm_equivalence():
    means, maxima = [], []
    for levels in (3, 6, 12):
        res = carleson.jn_equivalence_test(carleson.random_jn_instances(levels, 100, rng=levels), (1.0, 2.0))
        means.append(res["mean_ratio"][2.0])
        maxima.append(res["max_ratio"][2.0])
    growth = [b / a for a, b in zip(means, means[1:])]
    ok = all(math.isfinite(x) for x in maxima) and all(g < 1.2 for g in growth)
    report("criterion 7 (Car^2 / Car^1)", ok,
           f"levels 3/6/12 max {[round(x, 4) for x in maxima]}, mean {[round(x, 4) for x in means]}, "
           f"growth {[round(x, 4) for x in growth]}")


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_c08_tangent_decoupling(p):
    res = decoupling.tangent_level_sweep((2, 4, 8, 16), p=p)
    inside = all(1 / c <= r["ratio"] <= c for c, L in zip(res["C"], res["levels"])
                 for r in res["rows"] if r["levels"] == L)
    ok = inside and all(math.isfinite(c) for c in res["C"]) and all(g < 1.2 for g in res["growth"])
    report(f"criterion 8 (tangent decoupling, p={p:g})", ok,
           f"levels {res['levels']}, C {[round(c, 4) for c in res['C']]}, "
           f"growth {[round(g, 4) for g in res['growth']]}")


def _paraproduct_setup(m, seed):
    rng = np.random.default_rng(seed)
    b1 = build_accretive("random_phase", m, rng, t=0.5)
    b2 = build_accretive("random_phase", m, rng, t=0.5)
    window = estimator.default_window(m, 8)
    systems = estimator.draw_systems(m, window, rng)
    bq, br = estimator.build_bases(m, systems, b1, b2, window)
    return rng, b2, bq, br


def test_c09_paraproduct():
    tele, cvs, details = [], [], []
    for name, m in (("cantor", cantor(0.25, 4, 2)), ("graph", graph_arclength("abs", 256))):
        rng, b2, bq, br = _paraproduct_setup(m, 0)
        g = rng.normal(size=(m.n_atoms, 2)) + 1j * rng.normal(size=(m.n_atoms, 2))
        tele.append(carleson.telescoping_check(g, bq, br, 3)["rel_err"])
        res = carleson.paraproduct_ratios(DiscreteOperator(cauchy_kernel(), m), bq, br.tree, b2, 3, n_g=20,
                                          p=2.0, rng=rng)
        cv = float(res["ratios"].std() / res["ratios"].mean())
        cvs.append(cv)
        details.append(f"{name}: ratio {res['min']:.3f}..{res['max']:.3f} cv {cv:.3f}")
    ok = max(tele) <= 1e-10 and max(cvs) <= 0.25 and all(math.isfinite(c) for c in cvs)
    report("criterion 9 (paraproduct)", ok, f"telescoping rel err {max(tele):.2e}; " + "; ".join(details))


def test_c10_preset_reproducible(preset_runs):
    a, b = preset_runs
    same = all((a["out"] / n).read_bytes() == (b["out"] / n).read_bytes()
               for n in ("summary.json", "cells.csv", "decay.csv"))
    n_atoms = json.loads((a["out"] / "summary.json").read_text())["n_atoms"]
    slowest = max(a["time"], b["time"])
    ok = same and a["code"] == b["code"] == 0 and slowest <= 300 and n_atoms == 4096
    report("criterion 10 (reference preset)", ok,
           f"byte-identical outputs: {same}, exit codes {a['code']}/{b['code']}, {n_atoms} atoms, "
           f"slowest run {slowest:.1f} s")
