import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbkit import estimator
from tbkit.dyadic import DyadicSystem, ShiftSequence, build_tree
from tbkit.haar import (NoValidChild, build_basis, build_haar, cond_expectation, decompose, haar_identity_errors,
                        martingale_difference, order_subcubes, reconstruct, subaccretive_margins,
                        unconditionality_estimate, verify_haar_norms)
from tbkit.measure import AccretiveFn, build_accretive, cantor, graph_arclength, lebesgue_grid


def setup_basis(m, b, levels, rng, extra_top=0):
    window = estimator.default_window(m, levels)
    systems = estimator.draw_systems(m, estimator.Window(window.bottom, window.top + extra_top), rng)
    return build_basis(m, systems.D, b, window.top + extra_top, window.bottom), systems.D


# ------------------------------------------------------------ expectations


def test_cond_expectation_b_one_is_plain_average():
    m = lebesgue_grid(1, 8)
    sysm = DyadicSystem(ShiftSequence.zero(1, -10, 2))
    f = np.arange(8.0)
    np.testing.assert_allclose(cond_expectation(f, AccretiveFn.one(8), -1, sysm, m), [1.5] * 4 + [5.5] * 4)


def test_cond_expectation_identity_below_atom_scale(rng):
    m = cantor(0.25, 3, 2)
    b = build_accretive("random_phase", m, rng, t=0.7)
    sysm = DyadicSystem(ShiftSequence.random(2, -30, 2, rng))
    f = rng.normal(size=m.n_atoms)
    np.testing.assert_allclose(cond_expectation(f, b, -20, sysm, m), f, rtol=1e-13)


def test_cond_expectation_reproduces_b(rng):
    m = cantor(0.25, 3, 2)
    b = build_accretive("random_phase", m, rng, t=0.7)
    sysm = DyadicSystem(ShiftSequence.random(2, -30, 2, rng))
    for k in range(-8, 2):
        np.testing.assert_allclose(cond_expectation(b.values, b, k, sysm, m), b.values, rtol=1e-13)


def test_martingale_difference_properties(rng):
    m = cantor(0.25, 3, 2)
    b = build_accretive("random_phase", m, rng, t=0.7)
    sysm = DyadicSystem(ShiftSequence.random(2, -30, 2, rng))
    for k in range(-6, 2):
        assert np.abs(martingale_difference(3.0 * b.values, b, k, sysm, m)).max() < 1e-13
    f = rng.normal(size=m.n_atoms) + 1j * rng.normal(size=m.n_atoms)
    bottom, top = -8, 1
    tot = cond_expectation(f, b, top, sysm, m) + sum(martingale_difference(f, b, k, sysm, m)
                                                      for k in range(bottom + 1, top + 1))
    np.testing.assert_allclose(tot, f, rtol=1e-12, atol=1e-12)
    # D_k^b f integrates to zero over every level-k cube
    tree = build_tree(m.points, m.weights, sysm, top, bottom)
    for i in range(1, len(tree.levels)):
        d = martingale_difference(f, b, int(tree.levels[i]), sysm, m)
        sums = np.bincount(tree.labels[i], (m.weights * d).real) + 1j * np.bincount(tree.labels[i], (m.weights * d).imag)
        assert np.abs(sums).max() < 1e-14


# ------------------------------------------------------------ ordering


def test_order_balanced_is_lexicographic():
    assert order_subcubes([0.25] * 4, 1.0) == [0, 1, 2, 3]


def test_order_heavy_child_goes_last():
    assert order_subcubes([0.0, 0.0, 1.0, 0.0], 1.0)[-1] == 2
    assert order_subcubes([0.0, 1.0], 1.0) == [0, 1]


def test_order_random_complex_satisfies_margins(rng):
    for _ in range(200):
        c = 0.25 * np.exp(1j * rng.uniform(-1.2, 1.2, 4)) * rng.uniform(0.2, 1.0, 4)
        mu = 1.0
        delta = abs(c.sum()) / mu
        order = order_subcubes(c, mu, delta)
        assert sorted(order) == [0, 1, 2, 3]
        assert subaccretive_margins(c[order], mu, delta).min() >= -1e-15


def test_order_raises_when_delta_too_large():
    with pytest.raises(NoValidChild):
        order_subcubes([1.0, -1.0 + 0.1j], 2.0, delta=2.0)


# ------------------------------------------------------------ Haar functions


def test_classical_haar():
    m = lebesgue_grid(1, 2)
    sysm = DyadicSystem(ShiftSequence.zero(1, -4, 2))
    Q = sysm.cube(0, [0])
    phi = build_haar(Q, 1, AccretiveFn.one(2), m)
    np.testing.assert_allclose(phi.full(2), [1.0, -1.0])
    v = verify_haar_norms(phi, m)
    assert v["l1_linf_product"] == pytest.approx(1.0, abs=1e-15)
    assert v["int_bphi"] == 0 and v["int_bphi2"] == pytest.approx(1.0)


def test_haar_zero_for_empty_child():
    m = lebesgue_grid(1, 2)
    m1 = type(m)(m.points[:1], m.weights[:1] * 2, 1.0, m.r_min)
    sysm = DyadicSystem(ShiftSequence.zero(1, -4, 2))
    phi = build_haar(sysm.cube(0, [0]), 1, AccretiveFn.one(1), m1)
    assert phi.is_zero


def test_geometric_and_tree_constructions_agree(cantor256_setup):
    s = cantor256_setup
    B, m = s["bq"], s["m"]
    for h in range(0, B.size, 17):
        phi = B.function(h)
        geo = build_haar(phi.cube, int(B.u[h]), s["b1"], m)
        np.testing.assert_allclose(geo.full(m.n_atoms), phi.full(m.n_atoms), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
def test_haar_identities(t):
    m = cantor(0.25, 4, 2)
    rng = np.random.default_rng(int(10 * t))
    b = build_accretive("random_phase", m, rng, t=t) if t else AccretiveFn.one(m.n_atoms)
    B, _ = setup_basis(m, b, 8, rng)
    ids = haar_identity_errors(B)
    assert ids["max_abs_int_bphi"] <= 1e-12
    assert ids["max_rel_int_bphi2"] <= 1e-10
    assert ids["min_subaccretive_margin"] >= -1e-12


def test_norm_constants_window():
    # frozen empirical window of |phi| against its two-sided profile and of the L^p norm ratios
    lo, hi = math.inf, 0.0
    for t in (0.0, 0.5, 1.0):  # delta = cos t in [0.54, 1]
        for seed in range(3):
            m = cantor(0.25, 3, 2)
            rng = np.random.default_rng(seed)
            b = build_accretive("random_phase", m, rng, t=t) if t else AccretiveFn.one(m.n_atoms)
            B, _ = setup_basis(m, b, 8, rng)
            for h in np.nonzero(B.u > 0)[0]:
                v = verify_haar_norms(B.function(int(h)), m)
                vals = list(v["norm_ratios"].values()) + [v["pointwise_lo"], v["pointwise_hi"]]
                lo, hi = min(lo, *vals), max(hi, *vals)
    assert 0.2 - 1e-9 <= lo and hi <= 5.0 + 1e-9


# ------------------------------------------------------------ bases


def test_coefficient_count_equals_atoms(rng):
    for m in (cantor(0.25, 4, 2), lebesgue_grid(1, 64), graph_arclength("abs", 100)):
        b = build_accretive("random_phase", m, rng, t=0.5)
        B, _ = setup_basis(m, b, 6, rng)
        assert B.size == m.n_atoms


def test_coefficients_of_b_live_on_top(cantor256_setup):
    s = cantor256_setup
    B = s["bq"]
    c = B.coefficients(s["b1"].values)[:, 0]
    assert np.abs(c[B.u > 0]).max() < 1e-13
    assert np.abs(c[B.u == 0]).min() > 0


@settings(max_examples=40, deadline=None)
@given(vals=st.lists(st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False),
                     min_size=64, max_size=64))
def test_round_trip_property(vals):
    m = cantor(0.25, 3, 2)
    B = build_basis(m, DyadicSystem(ShiftSequence.random(2, -30, 4, 0)), AccretiveFn.one(64), 0,
                    estimator.resolving_bottom(m))
    f = np.array(vals)
    rec = reconstruct(decompose(f, B))
    assert np.abs(rec - f).max() <= 1e-9 * max(1.0, np.abs(f).max())


def test_round_trip(cantor256_setup, rng):
    B = cantor256_setup["bq"]
    f = rng.normal(size=(256, 3)) + 1j * rng.normal(size=(256, 3))
    rec = reconstruct(decompose(f, B))
    assert np.linalg.norm(rec - f) / np.linalg.norm(f) <= 1e-10
    f1 = f[:, 0]
    rec1 = reconstruct(decompose(f1, B))
    assert rec1.shape == f1.shape
    assert np.linalg.norm(rec1 - f1) / np.linalg.norm(f1) <= 1e-10


def test_level_projection_matches_martingale_difference(cantor256_setup, rng):
    s = cantor256_setup
    B, m = s["bq"], s["m"]
    f = rng.normal(size=256) + 1j * rng.normal(size=256)
    for k in B.tree.levels[1:]:
        direct = martingale_difference(f, s["b1"], int(k), B.system, m)
        np.testing.assert_allclose(B.projection_by_level(f, int(k)), direct, atol=1e-12)


def test_decomposition_csv(cantor256_setup, tmp_path, rng):
    B = cantor256_setup["bq"]
    dec = decompose(rng.normal(size=256), B)
    dec.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == B.size + 1 and lines[0].startswith("level,coords,u")


# ------------------------------------------------------------ unconditionality


def test_unconditional_orthogonal_case(rng):
    m = lebesgue_grid(1, 64)
    B, _ = setup_basis(m, AccretiveFn.one(64), 7, rng)
    f = rng.normal(size=64)
    assert unconditionality_estimate(f, B, 2.0, 2.0, 32, rng) == pytest.approx(1.0, rel=1e-12)


def test_unconditional_single_term(cantor256_setup):
    B = cantor256_setup["bq"]
    h = int(np.nonzero(B.u > 0)[0][5])
    f = cantor256_setup["b1"].values * B.matrix.getrow(h).toarray().ravel()
    assert unconditionality_estimate(f, B, 3.0, 2.0, 16, 0) == pytest.approx(1.0, rel=1e-12)


def test_unconditional_stable_under_refinement():
    vals = []
    for depth in (2, 4, 8):
        m = cantor(0.25, depth, 1)
        rng = np.random.default_rng(0)
        b = build_accretive("random_phase", m, rng, t=0.5)
        B, _ = setup_basis(m, b, 2 * depth + 2, rng)
        f = rng.normal(size=(m.n_atoms, 8))
        vals.append(unconditionality_estimate(f, B, 3.0, 2.0, 64, rng=1))
    assert all(math.isfinite(v) for v in vals)
    assert all(b / a < 1.2 for a, b in zip(vals, vals[1:]))
