"""BMO and Carleson norms, the abstract paraproduct and the paraproduct Pi_2."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dyadic import Cube, DyadicSystem, Filtration, ShiftSequence, _group_sum, build_tree
from .haar import HaarBasis, _as_2d, _bvals, _delta_floor, cond_expectation, lp_norm, pointwise_norm
from .measure import AccretivityViolation, AtomicMeasure, lebesgue_grid

EXACT_LEVELS = 12


class NotAdapted(ValueError):
    """A Carleson sequence term is not measurable for its own level."""


# -------------------------------------------------------------------- BMO


def cube_masks(tree: Filtration, lam: float = 1.0, points=None):
    """Yield (cube, atom mask of Q, atom mask of lam Q) for every block of a dyadic tree."""
    pts = points
    for i in range(len(tree.levels)):
        lab = tree.labels[i]
        for blk in range(tree.n_blocks(i)):
            inside = lab == blk
            Q = tree.cube(i, blk)
            dil = inside if lam == 1 or pts is None else Q.dilate_contains(pts, lam)
            yield Q, inside, dil


def bmo_norm(h, m: AtomicMeasure, cubes, p: float = 1.0, lam: float = 1.0, q: float = 2.0) -> float:
    """sup over cubes of (mu(lam Q)^-1 int_Q |h - <h>_Q|^p)^(1/p).

    ``cubes`` is an iterable of Cube objects or a dyadic Filtration (all of
    its blocks). Cubes whose dilate carries no mass are skipped.
    """
    if lam < 1:
        raise ValueError("lam must be >= 1")
    h2, _ = _as_2d(h)
    w = m.weights
    if isinstance(cubes, Filtration) and lam == 1:
        best = 0.0
        for i in range(len(cubes.levels)):
            lab = cubes.labels[i]
            nb = cubes.n_blocks(i)
            mass = np.bincount(lab, w, nb)
            mean = _group_sum(lab, w[:, None] * h2, nb) / mass[:, None]
            dev = pointwise_norm(h2 - mean[lab], q) ** p
            best = max(best, float((np.bincount(lab, w * dev, nb) / mass).max()))
        return best ** (1 / p)
    if isinstance(cubes, Filtration):
        cubes = [Q for Q, _, _ in cube_masks(cubes)]
    best = 0.0
    for Q in cubes:
        inside = Q.contains_points(m.points)
        dil = inside if lam == 1 else Q.dilate_contains(m.points, lam)
        mu_dil = w[dil].sum()
        if mu_dil == 0 or not inside.any():
            continue
        hq = h2[inside]
        mean = (w[inside, None] * hq).sum(axis=0) / w[inside].sum()
        val = np.dot(w[inside], pointwise_norm(hq - mean, q) ** p) / mu_dil
        best = max(best, float(val))
    return best ** (1 / p)


# --------------------------------------------------------- Carleson norms


@dataclass(frozen=True)
class CarlesonSequence:
    """Terms theta_j, keyed by the filtration level j; values per atom, shape (n,) or (n, m)."""

    theta: dict
    adapted: bool = True

    def levels(self) -> list[int]:
        return sorted(self.theta)

    def scaled(self, c) -> "CarlesonSequence":
        return CarlesonSequence({j: c * v for j, v in self.theta.items()}, self.adapted)


def check_adapted(seq: CarlesonSequence, filt: Filtration, tol: float = 1e-12) -> None:
    """Raise NotAdapted unless each theta_j is constant on the level-j blocks."""
    for j, v in seq.theta.items():
        v2, _ = _as_2d(v)
        i = filt.index(j)
        mean = filt.cond_mean(i, v2)
        scale = max(1.0, float(np.abs(v2).max(initial=0.0)))
        if np.abs(mean - v2).max(initial=0.0) > tol * scale:
            raise NotAdapted(f"theta at level {j} is not measurable for its level")


def sign_patterns(n_levels: int, trials: Optional[int] = None, rng=None) -> np.ndarray:
    """All 2^L sign vectors when trials is None, else ``trials`` random ones."""
    if trials is None:
        if n_levels > 20:
            raise ValueError("exact enumeration limited to 20 levels")
        return np.array(list(itertools.product((1.0, -1.0), repeat=n_levels))).reshape(-1, n_levels)
    rng = np.random.default_rng(rng)
    return rng.choice((-1.0, 1.0), size=(trials, n_levels))


def _sign_moments(values: list, p_list, signs: Optional[np.ndarray], q: float):
    """E_eps || sum_{j <= k} eps_j v_j(x) ||^p per prefix k, atom x and p.

    ``values`` is ordered from the finest level up. With ``signs`` None the
    expectation is exact: the prefix up to k only sees 2^k distinct patterns
    once the global sign flip is factored out, so the pattern set doubles
    level by level. Returns an array of shape (len(p_list), L, n).
    """
    L = len(values)
    n, mdim = values[0].shape
    out = np.zeros((len(p_list), L, n))

    def record(k, partial):
        if q == 2:
            sq = (partial.real ** 2 + partial.imag ** 2).sum(axis=-1)
            for a, p in enumerate(p_list):
                out[a, k] = (sq if p == 2 else sq ** (p / 2)).mean(axis=0)
            return
        nrm = pointwise_norm(partial, q)
        for a, p in enumerate(p_list):
            out[a, k] = (nrm ** p).mean(axis=0)

    if signs is None:
        partial = values[0][None].astype(complex)
        record(0, partial)
        for k in range(1, L):
            partial = np.concatenate([partial + values[k][None], partial - values[k][None]])
            record(k, partial)
        return out
    partial = np.zeros((signs.shape[0], n, mdim), dtype=complex)
    for k in range(L):
        partial += signs[:, k, None, None] * values[k][None]
        record(k, partial)
    return out


def carleson_profile(seq: CarlesonSequence, filt: Filtration, p_list=(1.0,), sign_trials: Optional[int] = None,
                     rng=None, q: float = 2.0, unions: int = 0) -> dict:
    """Car^p for every p in ``p_list`` with the maximizing (k, block).

    A ranges over the blocks of level k. With ``unions`` > 0 that many random
    unions of two or three level-k blocks are tried as well and the largest
    excess of a union value over the block value is reported; it is never
    positive, because a ratio of sums is at most the largest block ratio.
    """
    rng = np.random.default_rng(rng)
    if seq.adapted:
        check_adapted(seq, filt)
    w = filt.weights
    levels = seq.levels()
    res = {"norms": {}, "argmax": {}, "union_excess": {}}
    if not levels or all(not np.any(seq.theta[j]) for j in levels):
        for p in p_list:
            res["norms"][p] = 0.0
            res["union_excess"][p] = 0.0
        return res
    vals = [_as_2d(np.asarray(seq.theta[j], dtype=complex))[0] for j in levels]
    exact = sign_trials is None and len(levels) <= EXACT_LEVELS
    signs = None if exact else sign_patterns(len(levels), sign_trials or 256, rng)
    mom = _sign_moments(vals, p_list, signs, q)
    res["exact"] = exact
    res["sign_patterns"] = 2 ** len(levels) if exact else int(signs.shape[0])
    for a, p in enumerate(p_list):
        best, arg, union_gap = 0.0, None, -math.inf
        for kk, j in enumerate(levels):
            # A in F_k for every filtration level k >= j, up to the next active level
            top = filt.index(levels[kk + 1]) if kk + 1 < len(levels) else len(filt.levels)
            for i in range(filt.index(j), top):
                lab = filt.labels[i]
                nb = filt.n_blocks(i)
                mass = np.bincount(lab, w, nb)
                ratio = np.bincount(lab, w * mom[a, kk], nb) / mass
                b = int(np.argmax(ratio))
                if ratio[b] > best:
                    best, arg = float(ratio[b]), (int(filt.levels[i]), b)
                if unions and nb >= 2:
                    sums = np.bincount(lab, w * mom[a, kk], nb)
                    for _ in range(unions):
                        size = int(rng.integers(2, min(3, nb) + 1))
                        pick = rng.choice(nb, size=size, replace=False)
                        union_gap = max(union_gap, sums[pick].sum() / mass[pick].sum() - ratio.max())
        res["norms"][p] = best ** (1 / p)
        res["argmax"][p] = arg
        res["union_excess"][p] = union_gap if math.isfinite(union_gap) else 0.0
    return res


def carleson_norm(seq: CarlesonSequence, p: float, filt: Filtration, sign_trials: Optional[int] = None,
                  rng=None, q: float = 2.0) -> float:
    return carleson_profile(seq, filt, (p,), sign_trials, rng, q)["norms"][p]


def random_adapted_sequence(filt: Filtration, levels, m: int = 1, rng=None, sparsity: float = 0.0) -> CarlesonSequence:
    """Gaussian block values at each listed level; a fraction ``sparsity`` of blocks is zeroed."""
    rng = np.random.default_rng(rng)
    theta = {}
    for j in levels:
        i = filt.index(j)
        nb = filt.n_blocks(i)
        v = rng.normal(size=(nb, m)) + 1j * rng.normal(size=(nb, m))
        if sparsity > 0:
            v[rng.random(nb) < sparsity] = 0
        theta[j] = v[filt.labels[i]]
    return CarlesonSequence(theta, True)


def jn_equivalence_test(instances, p_list=(1.0, 2.0, 4.0), sign_trials: Optional[int] = None, rng=None,
                        q: float = 2.0) -> dict:
    """Car^p over a list of (sequence, filtration) instances with per-instance ratios.

    Ratios are Car^p / Car^1 for each p; a zero sequence has ratio 1.
    """
    rows = []
    for idx, (seq, filt) in enumerate(instances):
        if not seq.adapted:
            raise NotAdapted("the norm equivalence needs adapted sequences")
        prof = carleson_profile(seq, filt, p_list, sign_trials, rng, q)
        base = prof["norms"][p_list[0]]
        ratios = {p: (prof["norms"][p] / base if base > 0 else 1.0) for p in p_list}
        rows.append({"instance": idx, "norms": prof["norms"], "ratios": ratios})
    maxima = {p: max(r["ratios"][p] for r in rows) for p in p_list}
    means = {p: float(np.mean([r["ratios"][p] for r in rows])) for p in p_list}
    return {"rows": rows, "max_ratio": maxima, "mean_ratio": means}


def random_jn_instances(levels: int, count: int, rng=None, atoms: int = 256, m: int = 4,
                        finest: int = -8) -> list:
    """(sequence, filtration) pairs on shifted dyadic trees of a uniform grid in [0, 1).

    Each tree spans ``levels`` levels from ``finest`` up. With a grid of 256
    atoms and finest = -8 every finest cube holds at most one atom; levels
    above 0 have at most two blocks.
    """
    rng = np.random.default_rng(rng)
    grid = lebesgue_grid(1, atoms)
    out = []
    for _ in range(count):
        sysm = DyadicSystem(ShiftSequence.random(1, finest - 22, finest + levels + 1, rng))
        tree = build_tree(grid.points, grid.weights, sysm, finest + levels - 1, finest)
        out.append((random_adapted_sequence(tree, list(tree.levels), m=m, rng=rng), tree))
    return out


# --------------------------------------------------- abstract paraproduct


def abstract_paraproduct(seq: CarlesonSequence, f, filt: Filtration, p: float = 2.0,
                         sign_trials: Optional[int] = None, rng=None, q: float = 2.0) -> dict:
    """|| sum_j eps_j theta_j E_j f ||_{L^p(Omega x E; X)} and its ratio to Car^1(theta) ||f||_p.

    theta_j are scalar multipliers (shape (n,)), f is scalar or (n, m).
    """
    rng = np.random.default_rng(rng)
    check_adapted(seq, filt)
    f2, _ = _as_2d(np.asarray(f, dtype=complex))
    levels = seq.levels()
    terms = []
    for j in levels:
        th = np.asarray(seq.theta[j])
        if th.ndim != 1:
            raise ValueError("abstract_paraproduct takes scalar theta_j")
        terms.append(th[:, None] * filt.cond_mean(filt.index(j), f2))
    w = filt.weights
    fn = lp_norm(f2, w, p, q)
    car1 = carleson_norm(seq, 1.0, filt, sign_trials, rng)
    if not terms or fn == 0:
        return {"norm": 0.0, "car1": car1, "f_norm": fn, "ratio": 0.0}
    exact = sign_trials is None and len(levels) <= EXACT_LEVELS
    signs = None if exact else sign_patterns(len(levels), sign_trials or 256, rng)
    mom = _sign_moments(terms, (p,), signs, q)[0, -1]
    norm = float(np.dot(w, mom) ** (1 / p))
    return {"norm": norm, "car1": car1, "f_norm": fn, "ratio": norm / (car1 * fn) if car1 > 0 else 0.0,
            "exact": exact}


# ------------------------------------------------------------ Pi_2 pieces


def boxes_contain(big_lo, big_side, small_lo, small_side) -> np.ndarray:
    """Elementwise containment of half-open boxes (broadcasting over leading axes)."""
    big_lo = np.asarray(big_lo)
    small_lo = np.asarray(small_lo)
    big_side = np.asarray(big_side)[..., None]
    small_side = np.asarray(small_side)[..., None]
    return np.all((big_lo <= small_lo) & (small_lo + small_side <= big_lo + big_side), axis=-1)


def _enclosing_blocks(basis: HaarBasis, other: Filtration, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``basis``, the block of ``other`` at level(Q) + shift holding Q (-1 if none).

    Containment is geometric: Q must lie inside the cube, not merely share atoms.
    """
    out = np.full(basis.size, -1, dtype=np.int64)
    levels = np.full(basis.size, np.iinfo(np.int64).min, dtype=np.int64)
    atom_of = _representative_atoms(basis)
    lo = basis.cube_lo()
    side = np.exp2(basis.level.astype(float))
    olevels = set(int(k) for k in other.levels)
    for h in range(basis.size):
        k = int(basis.level[h]) + shift
        levels[h] = k
        if k not in olevels:
            continue
        i = other.index(k)
        blk = other.labels[i][atom_of[h]]
        R = other.cube(i, blk)
        if boxes_contain(R.lo, R.side, lo[h], side[h]):
            out[h] = blk
    return out, levels


def _representative_atoms(basis: HaarBasis) -> np.ndarray:
    """One atom of the cube Q of each row (its Haar function is supported on Q)."""
    tree = basis.tree
    rep = np.empty(basis.size, dtype=np.int64)
    for i in range(len(tree.levels)):
        first = np.full(tree.n_blocks(i), -1, dtype=np.int64)
        lab = tree.labels[i]
        first[lab[::-1]] = np.arange(len(lab))[::-1]
        rows = np.nonzero(basis.level == tree.levels[i])[0]
        rep[rows] = first[basis.block[rows]]
    return rep


def _mean_over(filt: Filtration, i: int, blk: int, values: np.ndarray) -> np.ndarray:
    mask = filt.labels[i] == blk
    w = filt.weights[mask]
    return (w[:, None] * values[mask]).sum(axis=0) / w.sum()


def paraproduct_pi2(g, T, basis: HaarBasis, other: Filtration, b2, r: int,
                    good_q: Optional[np.ndarray] = None, good_r: Optional[dict] = None,
                    tb2: Optional[np.ndarray] = None) -> np.ndarray:
    """Pi_2 g = sum over good R, good Q in R with l(Q) = 2^-r l(R) of
    (<g>_R / <b2>_R) <T^t b2, b1 phi_Q> phi_Q.

    ``basis`` is the b1-adapted system of the Q cubes, ``other`` the tree of
    the R system. ``good_q`` masks basis rows; ``good_r`` maps a level of
    ``other`` to a block mask. Passing None keeps every cube. ``tb2`` may
    supply T^t b2 to avoid recomputing it.
    """
    m = basis.measure
    g2, flat = _as_2d(np.asarray(g, dtype=complex))
    bv2 = _bvals(b2)
    if tb2 is None:
        tb2 = T.apply_transpose(bv2)
    # <T^t b2, b1 phi_Q> for every row
    tcoef = basis.coefficients(tb2 * basis.b.values)[:, 0]
    enc, rlev = _enclosing_blocks(basis, other, r)
    coef = np.zeros((basis.size, g2.shape[1]), dtype=complex)
    floor = _delta_floor(b2)
    cache = {}
    for h in np.nonzero((basis.u > 0) & (enc >= 0))[0]:
        if good_q is not None and not good_q[h]:
            continue
        k = int(rlev[h])
        blk = int(enc[h])
        if good_r is not None and not good_r[k][blk]:
            continue
        if (k, blk) not in cache:
            i = other.index(k)
            gR = _mean_over(other, i, blk, g2)
            bR = complex(_mean_over(other, i, blk, bv2[:, None])[0])
            if abs(bR) < floor:
                raise AccretivityViolation(f"degenerate <b2>_R at level {k}")
            cache[(k, blk)] = gR / bR
        coef[h] = cache[(k, blk)] * tcoef[h]
    out = np.asarray(basis.matrix.T @ coef)
    return out[:, 0] if flat else out


def haar_average_matrix(basis: HaarBasis, target: Filtration) -> tuple[sp.csr_matrix, np.ndarray]:
    """Averages <phi_h>_P of every row over every block P of ``target``.

    Returns a sparse (rows x blocks) matrix and the offset of each level's
    blocks in the column index.
    """
    n = target.n_atoms
    offsets = np.concatenate([[0], np.cumsum([target.n_blocks(i) for i in range(len(target.levels))])])
    cols = np.concatenate([offsets[i] + target.labels[i] for i in range(len(target.levels))])
    rows = np.tile(np.arange(n), len(target.levels))
    ind = sp.csr_matrix((np.ones(len(cols)), (cols, rows)), shape=(offsets[-1], n))
    mass = np.asarray(ind @ target.weights).ravel()
    avg = (basis.matrix.multiply(target.weights[None, :]).tocsr() @ ind.T).tocsr()
    avg = sp.csr_matrix(avg.multiply(1.0 / mass[None, :]))
    return avg, offsets


def telescoping_check(g, basis_q: HaarBasis, basis_r: HaarBasis, r: int) -> dict:
    """Two evaluations of the collapsed correction factor for every cancellative Q.

    Haar side: sum over R in the other system containing Q with
    l(R) > 2^r l(Q) of <D_R g / b2>_Q, plus the top term <E_R g / b2>_Q,
    each written through <psi_R, g> <psi_R>_Q. Expectation side:
    <E_{k0-1} g / b2>_Q, where k0 is the first level above level(Q) + r from
    which Q lies inside a cube of the other system (zero if that never
    happens inside the window). No goodness restriction is applied.
    """
    m = basis_q.measure
    g2, _ = _as_2d(np.asarray(g, dtype=complex))
    other = basis_r.tree
    bsys = other.system
    avg, offsets = haar_average_matrix(basis_r, basis_q.tree)
    cg = basis_r.coefficients(g2)
    lo_q = basis_q.cube_lo()
    lo_r = basis_r.cube_lo()
    side_r = np.exp2(basis_r.level.astype(float))
    top = int(other.levels[-1])
    rep = _representative_atoms(basis_q)
    cols_q = offsets[basis_q.level - basis_q.bottom_level] + basis_q.block
    canc = np.nonzero(basis_q.u > 0)[0]
    avg_dense_cols = avg[:, cols_q[canc]].toarray()  # (rows_r, canc)
    lhs = np.zeros((len(canc), g2.shape[1]), dtype=complex)
    rhs = np.zeros_like(lhs)
    cache = {}
    w = m.weights
    for c, h in enumerate(canc):
        kq = int(basis_q.level[h])
        side_q = 2.0 ** kq
        inside = boxes_contain(lo_r, side_r, lo_q[h], side_q) & (basis_r.level > kq + r)
        lhs[c] = (avg_dense_cols[inside, c][:, None] * cg[inside]).sum(axis=0)
        # first containing level
        k0 = None
        for k in range(kq + r + 1, top + 1):
            i = other.index(k)
            R = other.cube(i, other.labels[i][rep[h]])
            if boxes_contain(R.lo, R.side, lo_q[h], side_q):
                k0 = k
                break
        if k0 is None:
            continue
        if k0 - 1 not in cache:
            cache[k0 - 1] = cond_expectation(g2, basis_r.b, k0 - 1, bsys, m) / basis_r.b.values[:, None]
        qmask = basis_q.tree.labels[kq - basis_q.bottom_level] == basis_q.block[h]
        rhs[c] = (w[qmask, None] * cache[k0 - 1][qmask]).sum(axis=0) / w[qmask].sum()
    scale = max(np.abs(rhs).max(initial=0.0), np.abs(lhs).max(initial=0.0), 1e-300)
    return {"max_abs_err": float(np.abs(lhs - rhs).max(initial=0.0)),
            "rel_err": float(np.abs(lhs - rhs).max(initial=0.0) / scale),
            "n_cubes": int(len(canc)), "haar_side": lhs, "expectation_side": rhs}


def bmo_haar_sum_test(h, basis: HaarBasis, R: Cube, r: int, p: float = 2.0, lam: float = 1.0,
                      good: Optional[np.ndarray] = None, sign_trials: Optional[int] = None,
                      rng=None, bmo_cubes=None) -> dict:
    """|| sum over good Q in R with l(Q) <= 2^-r l(R) of eps_Q <h, b1 phi_Q> phi_Q ||_p
    divided by mu(R)^(1/p) ||h||_BMO.

    Signs are drawn per level; at a fixed point only one cube per level
    contributes, so this has the same distribution as signs per cube.
    BMO is taken over ``bmo_cubes`` (default: every cube of the basis tree).
    """
    m = basis.measure
    h2, _ = _as_2d(np.asarray(h, dtype=complex))
    lo = basis.cube_lo()
    side = np.exp2(basis.level.astype(float))
    sel = (basis.u > 0) & boxes_contain(R.lo, R.side, lo, side) & (basis.level <= R.level - r)
    if good is not None:
        sel &= good
    coeff = basis.coefficients(h2 * basis.b.values[:, None])
    coeff[~sel] = 0
    levels = sorted(set(int(k) for k in basis.level[sel]))
    bmo = bmo_norm(h2, m, basis.tree if bmo_cubes is None else bmo_cubes, p, lam)
    mu_r = m.weights[R.contains_points(m.points)].sum()
    if not levels:
        return {"lhs": 0.0, "bmo": bmo, "mu_R": mu_r, "ratio": 0.0}
    terms = []
    for k in levels:
        c = np.where((basis.level == k)[:, None], coeff, 0)
        terms.append(np.asarray(basis.matrix.T @ c))
    exact = sign_trials is None and len(levels) <= EXACT_LEVELS
    signs = None if exact else sign_patterns(len(levels), sign_trials or 256, rng)
    mom = _sign_moments(terms, (p,), signs, 2.0)[0, -1]
    lhs = float(np.dot(m.weights, mom) ** (1 / p))
    denom = mu_r ** (1 / p) * bmo
    return {"lhs": lhs, "bmo": bmo, "mu_R": float(mu_r), "ratio": lhs / denom if denom > 0 else 0.0,
            "exact": exact}


def paraproduct_ratios(T, basis: HaarBasis, other: Filtration, b2, r: int, n_g: int = 20, p: float = 2.0,
                       rng=None, m_dim: int = 1) -> dict:
    """||Pi_2 g||_p / (||T^t b2||_BMO ||g||_p) for ``n_g`` random complex Gaussian g.

    BMO is the L^p variant over the cubes of the basis tree.
    """
    rng = np.random.default_rng(rng)
    m = basis.measure
    tb2 = T.apply_transpose(_bvals(b2))
    bmo = bmo_norm(tb2, m, basis.tree, p)
    ratios = []
    for _ in range(n_g):
        g = rng.normal(size=(m.n_atoms, m_dim)) + 1j * rng.normal(size=(m.n_atoms, m_dim))
        out = paraproduct_pi2(g, T, basis, other, b2, r, tb2=tb2)
        denom = bmo * lp_norm(g, m.weights, p)
        ratios.append(lp_norm(out, m.weights, p) / denom if denom > 0 else 0.0)
    ratios = np.array(ratios)
    return {"ratios": ratios, "bmo": bmo, "max": float(ratios.max()), "min": float(ratios.min()),
            "mean": float(ratios.mean()), "spread": float(ratios.max() / ratios.min()) if ratios.min() > 0 else math.inf}
