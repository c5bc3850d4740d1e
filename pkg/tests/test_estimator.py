import math

import numpy as np
import pytest

from tbkit import estimator as E
from tbkit.dyadic import DyadicSystem, GoodnessParams, ShiftSequence
from tbkit.kernel import (DiscreteOperator, cauchy_kernel, hilbert_kernel, matrix_coeff, pair_matrix,
                          zero_kernel)
from tbkit.measure import AccretiveFn, build_accretive, cantor


@pytest.fixture(scope="module")
def grid2():
    return DyadicSystem(ShiftSequence.zero(2, -30, 10))


def test_same_cube_is_close(grid2):
    Q = grid2.cube(-3, [1, 2])
    assert E.classify_pair(Q, Q, 3) == E.PairClass("close", 0, 0)


def test_contained_depth(grid2):
    R = grid2.cube(0, [0, 0])
    assert E.classify_pair(grid2.cube(-4, [5, 5]), R, 3) == E.PairClass("contained", 4, 0)
    assert E.classify_pair(grid2.cube(-3, [3, 3]), R, 3).tag == "close"
    assert E.classify_pair(R, grid2.cube(-4, [5, 5]), 3) == E.PairClass("transposed-contained", 4, 0)
    assert E.classify_pair(R, grid2.cube(-3, [3, 3]), 3) == E.PairClass("close", -3, 0)


def test_separated_example(grid2):
    c = E.classify_pair(grid2.cube(-2, [0, 0]), grid2.cube(0, [2, 0]), 3)
    assert c.tag == "separated" and c.n == 2


def test_classification_exhaustive(grid2, rng):
    levels_q = rng.integers(-8, 1, 400)
    levels_r = rng.integers(-8, 1, 400)
    cq = [rng.integers(0, 2 ** (4 - k), 2) for k in levels_q]
    cr = [rng.integers(0, 2 ** (4 - k), 2) for k in levels_r]
    Qs = [grid2.cube(int(k), c) for k, c in zip(levels_q, cq)]
    Rs = [grid2.cube(int(k), c) for k, c in zip(levels_r, cr)]
    arr = E.classify_arrays(np.array([Q.lo for Q in Qs]), levels_q, np.array([R.lo for R in Rs]), levels_r, 3)
    for i, (Q, R) in enumerate(zip(Qs, Rs)):
        c = E.classify_pair(Q, R, 3)
        assert E.TAGS[arr["code"][i]] == c.tag
        assert arr["n"][i] == c.n and arr["j"][i] == c.j
    assert set(arr["code"].tolist()) <= {E.SEP, E.CONT, E.CLOSE, E.TSEP, E.TCONT}


def test_expand_pairing_exact(cantor256_setup, rng):
    s = cantor256_setup
    T = DiscreteOperator(cauchy_kernel(), s["m"])
    f = rng.normal(size=256) + 1j * rng.normal(size=256)
    g = rng.normal(size=(256, 2)) + 1j * rng.normal(size=(256, 2))
    res = E.expand_pairing(g, f[:, None] * np.ones(2), T, s["systems"], s["b1"], s["b2"], s["window"], r=3)
    assert res.rel_err <= 1e-8
    assert res.reconcile_err <= 1e-8
    assert abs(sum(res.class_sums().values()) - res.total) <= 1e-10 * abs(res.total)


def test_expand_pairing_with_goodness(cantor256_setup, rng):
    s = cantor256_setup
    T = DiscreteOperator(cauchy_kernel(), s["m"])
    f = rng.normal(size=256)
    g = rng.normal(size=256)
    res = E.expand_pairing(g, f, T, s["systems"], s["b1"], s["b2"], s["window"], GoodnessParams(r=3))
    assert res.rel_err <= 1e-8 and res.reconcile_err <= 1e-8
    assert 0 < res.good_q.mean() < 1
    # the bad cell is the sum over pairs with at least one bad cube
    M = pair_matrix(T, res.basis_g.matrix, res.basis_f.matrix, s["b1"], s["b2"])
    P = res.cg[:, :1] * M * res.cf[:, 0][None, :]
    bad = ~(res.good_r[:, None] & res.good_q[None, :])
    assert res.class_sums()["bad"] == pytest.approx(P[bad].sum(), rel=1e-10)


def test_single_coefficient_pairing(cantor256_setup):
    s = cantor256_setup
    T = DiscreteOperator(cauchy_kernel(), s["m"])
    bq, br = s["bq"], s["br"]
    Q, R = 40, 7
    f = s["b1"].values * bq.function(Q).full(256)
    g = s["b2"].values * br.function(R).full(256)
    res = E.expand_pairing(g, f, T, s["systems"], s["b1"], s["b2"], s["window"], r=3, bases=(bq, br))
    want = matrix_coeff(T, br.function(R), bq.function(Q), s["b1"], s["b2"])
    assert res.total == pytest.approx(want, rel=1e-10)
    assert res.direct == pytest.approx(want, rel=1e-10)


def test_antisymmetric_kernel_vanishes(cantor256_setup, rng):
    s = cantor256_setup
    T = DiscreteOperator(cauchy_kernel(), s["m"])
    one = AccretiveFn.one(256)
    f = rng.normal(size=256) + 1j * rng.normal(size=256)
    res = E.expand_pairing(f, f, T, s["systems"], one, one, s["window"], r=3)
    scale = np.abs(f).max() ** 2 * np.abs(T.matrix()).max()
    assert abs(res.direct) <= 1e-12 * scale and abs(res.total) <= 1e-12 * scale


def test_zero_kernel_cells(cantor256_setup, rng):
    s = cantor256_setup
    T = DiscreteOperator(zero_kernel(), s["m"])
    f = rng.normal(size=256)
    res = E.expand_pairing(f, f, T, s["systems"], s["b1"], s["b2"], s["window"], r=3)
    assert res.total == 0 and res.direct == 0
    assert all(c.total == 0 for c in res.cells.values())


def test_separated_decay(cantor256_setup, rng):
    s = cantor256_setup
    T = DiscreteOperator(cauchy_kernel(), s["m"])
    f = rng.normal(size=256) + 1j * rng.normal(size=256)
    g = rng.normal(size=256)
    res = E.expand_pairing(g, f, T, s["systems"], s["b1"], s["b2"], s["window"], r=3)
    rep = E.regime_norms(res, rng=0)
    assert rep.decay_slope <= -T.kernel.alpha / 2 * math.log(2) + 0.15
    assert all(math.isfinite(v) for v in rep.contained_ratio.values())
    assert all(c.rand_norm >= 0 for c in rep.cells)


def test_separated_decay_needs_two_points():
    slope, pts = E.separated_decay([])
    assert math.isnan(slope) and pts == []


@pytest.mark.parametrize("r", [4, 6, 8])
def test_contained_ratios_finite(r):
    res = E.contained_refinement_sweep(chain=((4, 12),), seeds=(0, 1), r=r)
    assert len(res["sup_clear"]) == 1
    assert 0 < res["sup_clear"][0] < 1
    assert res["sup_all"][0] >= res["sup_clear"][0]


def test_good_bad_split(cantor256_setup, rng):
    s = cantor256_setup
    bq = s["bq"]
    f = rng.normal(size=256) + 1j * rng.normal(size=256)
    good = rng.random(bq.size) < 0.7
    out = E.good_bad_split(f, bq, good)
    np.testing.assert_allclose(out["f_good"] + out["f_bad"], f, atol=1e-12)
    assert out["bad_cubes"] == int((~good).sum())
    allgood = E.good_bad_split(f, bq, np.ones(bq.size, dtype=bool))
    assert np.all(allgood["f_bad"] == 0) and allgood["bad_fraction"] == 0


def test_bad_fraction_decreases_with_r():
    m = cantor(0.25, 3, 2)
    rng = np.random.default_rng(0)
    b = build_accretive("random_phase", m, rng, t=0.5)
    f = rng.normal(size=m.n_atoms)
    res = E.bad_fraction_sweep(m, f, b, (8, 16, 32), draws=200, levels=6, rng=rng)
    assert res[8] >= res[16] >= res[32]
    assert res[32] < 0.5


def test_operator_norm_against_svd():
    m = cantor(0.25, 7, 1)
    T = DiscreteOperator(hilbert_kernel(), m)
    svd = E.svd_norm(T)
    est = [E.operator_norm_estimate(T, probes=k, rng=0) for k in (1, 2, 4)]
    assert est[0] <= est[1] <= est[2] <= svd * (1 + 1e-10)
    assert est[-1] >= 0.95 * svd
    assert E.operator_norm_estimate(DiscreteOperator(zero_kernel(), m)) == 0.0


def test_operator_norm_p3_finite():
    m = cantor(0.25, 5, 1)
    T = DiscreteOperator(hilbert_kernel(), m)
    val = E.operator_norm_estimate(T, p=3.0, q=3.0, m_dim=2, probes=2, rng=0)
    assert math.isfinite(val) and val > 0


@pytest.mark.parametrize("raw, path", [
    ({"preset": "cantor-cauchy", "bogus": 1}, "bogus"),
    ({"preset": "nope"}, "preset"),
    ({"kernel": {"name": "cauchy"}}, "measure"),
    ({"preset": "cantor-cauchy", "goodness": {"r": 2}}, "goodness.r"),
    ({"preset": "cantor-cauchy", "levels": 5}, "levels"),
    ({"preset": "cantor-cauchy", "p": 1.0}, "p"),
    ({"preset": "cantor-cauchy", "X": {"q": 2.0, "m": 0}}, "X.m"),
    ({"preset": "cantor-cauchy", "trials": True}, "trials"),
])
def test_config_errors(raw, path):
    with pytest.raises(E.ConfigError) as exc:
        E.ExperimentConfig.from_dict(raw).build()
    assert exc.value.path == path


def test_config_file_errors(tmp_path):
    with pytest.raises(E.ConfigError):
        E.ExperimentConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(E.ConfigError):
        E.ExperimentConfig.from_json(bad)


def test_run_experiment_deterministic(tmp_path):
    cfg = E.ExperimentConfig.from_dict({"preset": "cantor-cauchy-small", "seed": 3})
    E.run_experiment(cfg, tmp_path / "a")
    _, summary = E.run_experiment(cfg, tmp_path / "b")
    for name in ("summary.json", "cells.csv", "decay.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert all(summary["assertions"].values())
