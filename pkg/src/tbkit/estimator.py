"""Expansion of <g, Tf> over adapted Haar pairs, regime accounting and the experiment harness."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .carleson import haar_average_matrix
from .dyadic import (Cube, GoodnessParams, RandomSystems, geometry, long_distance_dyad,
                     min_admissible_r)
from .haar import HaarBasis, _as_2d, _bvals, build_basis, lp_norm
from .kernel import DiscreteOperator, decay_slope, kernel_from_json, pair_matrix, pairing
from .measure import AtomicMeasure, build_accretive, measure_from_json

TAGS = ("separated", "contained", "close", "transposed-separated", "transposed-contained",
        "paraproduct-corrected", "bad")
SEP, CONT, CLOSE, TSEP, TCONT, PARA, BAD = range(len(TAGS))
_N_OFF, _N_SPAN, _J_SPAN = 64, 129, 64
ROW_BLOCK = 256


@dataclass(frozen=True)
class PairClass:
    """Regime of a pair (Q, R): tag, level gap n and distance dyad j.

    For close pairs n is level(R) - level(Q) and may be negative; for the
    other tags it is the nonnegative gap between the larger and smaller cube.
    """

    tag: str
    n: int
    j: int


def classify_pair(Q: Cube, R: Cube, r) -> PairClass:
    """Regime of Q (the f-side cube) against R (the g-side cube); ``r`` may be GoodnessParams."""
    r = int(getattr(r, "r", r))
    if Q.level <= R.level:
        return _classify_ordered(Q, R, r, transposed=False)
    return _classify_ordered(R, Q, r, transposed=True)


def _classify_ordered(small: Cube, big: Cube, r: int, transposed: bool) -> PairClass:
    n = big.level - small.level
    geo = geometry(small, big)
    if small.side <= min(geo["dist"], big.side):
        return PairClass("transposed-separated" if transposed else "separated", n, long_distance_dyad(small, big))
    if n > r and big.contains_cube(small):
        return PairClass("transposed-contained" if transposed else "contained", n, 0)
    return PairClass("close", -n if transposed else n, 0)


def classify_arrays(lo_q, lv_q, lo_r, lv_r, r: int) -> dict:
    """Vectorized classify_pair over broadcast arrays of cube corners and levels.

    Returns integer tag codes (indices into TAGS), n, j and the box distance.
    """
    lo_q = np.asarray(lo_q, dtype=float)
    lo_r = np.asarray(lo_r, dtype=float)
    lv_q = np.asarray(lv_q, dtype=np.int64)
    lv_r = np.asarray(lv_r, dtype=np.int64)
    sq = np.exp2(lv_q.astype(float))
    sr = np.exp2(lv_r.astype(float))
    gaps = np.maximum(0.0, np.maximum(lo_r - (lo_q + sq[..., None]), lo_q - (lo_r + sr[..., None])))
    dist = np.sqrt((gaps * gaps).sum(axis=-1))
    small_q = lv_q <= lv_r
    small = np.minimum(sq, sr)
    big = np.maximum(sq, sr)
    gap = lv_r - lv_q
    sep = small <= np.minimum(dist, big)
    q_in_r = np.all((lo_r <= lo_q) & (lo_q + sq[..., None] <= lo_r + sr[..., None]), axis=-1)
    r_in_q = np.all((lo_q <= lo_r) & (lo_r + sr[..., None] <= lo_q + sq[..., None]), axis=-1)
    cont = small_q & q_in_r & (gap > r)
    tcont = ~small_q & r_in_q & (-gap > r)
    code = np.where(sep, np.where(small_q, SEP, TSEP),
                    np.where(cont, CONT, np.where(tcont, TCONT, CLOSE)))
    ratio = (small + dist + big) / big
    j = np.where(sep, np.maximum(0, np.ceil(np.log2(ratio) - 1e-12).astype(np.int64) - 1), 0)
    n = np.where(code == CLOSE, gap, np.abs(gap))
    return {"code": code, "n": n, "j": j, "dist": dist}


def skeleton_distance(lo_s, side_s, lo_b, side_b) -> np.ndarray:
    """Distance from boxes S to the union of the hyperplanes through the corners and
    midpoints of boxes B (the boundaries of B and of its half-side children)."""
    out = None
    for frac in (0.0, 0.5, 1.0):
        c = lo_b + frac * side_b[..., None]
        d = np.where(c <= lo_s, lo_s - c, np.where(c >= lo_s + side_s[..., None], c - lo_s - side_s[..., None], 0.0))
        d = d.min(axis=-1)
        out = d if out is None else np.minimum(out, d)
    return out


def _cell_id(code, n, j):
    return (np.asarray(code) * _N_SPAN + (np.asarray(n) + _N_OFF)) * _J_SPAN + np.minimum(j, _J_SPAN - 1)


def _cell_key(cid: int) -> tuple[str, int, int]:
    j = cid % _J_SPAN
    rest = cid // _J_SPAN
    return TAGS[rest // _N_SPAN], int(rest % _N_SPAN - _N_OFF), int(j)


# ------------------------------------------------------------ window


@dataclass(frozen=True)
class Window:
    bottom: int
    top: int

    @property
    def n_levels(self) -> int:
        return self.top - self.bottom + 1


def resolving_bottom(m: AtomicMeasure) -> int:
    """Largest level whose cubes (in any shifted grid) hold at most one atom."""
    sep = m.min_separation()
    if not math.isfinite(sep):
        return 0
    root = math.sqrt(m.dim_n)
    k = math.floor(math.log2(sep / root))
    while root * 2.0 ** k >= sep:
        k -= 1
    return k


def default_window(m: AtomicMeasure, levels: int) -> Window:
    bottom = resolving_bottom(m)
    return Window(bottom, bottom + levels - 1)


def draw_systems(m: AtomicMeasure, window: Window, rng=None, extra: int = 0) -> RandomSystems:
    """Four shift sequences covering the window; ``extra`` levels above it feed goodness."""
    return RandomSystems.draw(m.dim_n, window.bottom - 24, window.top - 1 + extra, rng)


def build_bases(m: AtomicMeasure, systems: RandomSystems, b1, b2, window: Window) -> tuple[HaarBasis, HaarBasis]:
    """b1-adapted basis on D (the f side) and b2-adapted basis on D' (the g side)."""
    out = []
    for sysm, b in ((systems.D, b1), (systems.Dp, b2)):
        basis = build_basis(m, sysm, b, window.top, window.bottom)
        if basis.tree.n_blocks(0) != m.n_atoms:
            raise ValueError(f"window bottom {window.bottom} does not resolve the atoms")
        out.append(basis)
    return out[0], out[1]


def row_goodness(basis: HaarBasis, systems: RandomSystems, params: GoodnessParams, primed: bool) -> np.ndarray:
    """Goodness of the cube of every basis row (D rows against D', D' rows against D)."""
    good = np.ones(basis.size, dtype=bool)
    tree = basis.tree
    for i, k in enumerate(tree.levels):
        rows = np.nonzero(basis.level == k)[0]
        if len(rows):
            good[rows] = systems.good_mask(tree, i, params, primed=primed)[basis.block[rows]]
    return good


# ------------------------------------------------------------ expansion


@dataclass(eq=False)
class Cell:
    tag: str
    n: int
    j: int
    count: int = 0
    y: Optional[np.ndarray] = field(default=None, repr=False)  # (rows of the g basis, components)
    max_t: float = 0.0
    max_ratio: float = 0.0
    max_ratio_good: float = 0.0
    total: complex = 0j
    rand_norm: float = float("nan")


@dataclass(frozen=True, eq=False)
class PairingResult:
    total: complex
    direct: complex
    rel_err: float
    cells: dict
    basis_f: HaarBasis
    basis_g: HaarBasis
    cf: np.ndarray
    cg: np.ndarray
    good_q: np.ndarray
    good_r: np.ndarray
    r: int
    alpha: float
    f: np.ndarray
    table: Optional[dict] = None

    @property
    def cell_total(self) -> complex:
        return complex(sum(c.total for c in self.cells.values()))

    @property
    def reconcile_err(self) -> float:
        return abs(self.cell_total - self.total) / max(abs(self.total), abs(self.direct), 1e-300)

    def class_sums(self) -> dict:
        out = {t: 0j for t in TAGS}
        for c in self.cells.values():
            out[c.tag] += c.total
        return out


def _abs_basis(basis: HaarBasis) -> HaarBasis:
    return dataclasses.replace(basis, matrix=abs(basis.matrix).tocsr())


def _averages(basis: HaarBasis, target: HaarBasis) -> sp.csr_matrix:
    """<row of basis>_C for the cube C of every row of target: (target rows x basis rows)."""
    avg, off = haar_average_matrix(basis, target.tree)
    cols = off[target.level_index()] + target.block
    return avg[:, cols].T.tocsr()


def expand_pairing(g, f, T: DiscreteOperator, systems: RandomSystems, b1, b2, window: Window,
                   params: Optional[GoodnessParams] = None, r: Optional[int] = None,
                   keep_table: bool = False, bases=None, stat_floor: Optional[int] = None) -> PairingResult:
    """<g, Tf> = sum over (R, Q) of <g, psi_R> T_RQ <phi_Q, f>, split into regime cells.

    Q runs over the b1-adapted basis on D, R over the b2-adapted basis on D',
    with T_RQ = <psi_R b2, T(b1 phi_Q)>. With ``params`` every pair with a
    bad cube goes to the bad cell; without, nothing is bad and ``r`` (default
    0) sets the contained depth. Contained pairs carry
    T~ = T_RQ - <psi_R>_Q <b2, T(b1 phi_Q)> and their correction goes to the
    paraproduct cell (n > 0); transposed contained pairs use the mirror
    correction <phi_Q>_R <psi_R b2, T b1> (paraproduct cell with n < 0).
    ``stat_floor`` restricts the decay and contained statistics (not the
    sums) to pairs whose cubes both sit at or above that level.
    """
    m = T.measure
    if r is None:
        r = params.r if params is not None else 0
    f2 = _as_2d(np.asarray(f, dtype=complex))[0]
    g2 = _as_2d(np.asarray(g, dtype=complex))[0]
    bv1, bv2 = _bvals(b1), _bvals(b2)
    basis_f, basis_g = bases if bases is not None else build_bases(m, systems, b1, b2, window)
    cf = np.asarray(basis_f.coefficients(f2))
    cg = np.asarray(basis_g.coefficients(g2))
    direct = pairing(m, g2, T.apply(f2))

    if params is not None:
        good_q = row_goodness(basis_f, systems, params, primed=False)
        good_r = row_goodness(basis_g, systems, params, primed=True)
    else:
        good_q = np.ones(basis_f.size, dtype=bool)
        good_r = np.ones(basis_g.size, dtype=bool)

    M = pair_matrix(T, basis_g.matrix, basis_f.matrix, b1, b2)
    total = complex(np.sum(cg * (M @ cf)))
    A = np.asarray(basis_f.coefficients(bv1 * T.apply_transpose(bv2)))[:, 0]
    B = np.asarray(basis_g.coefficients(bv2 * T.apply(bv1)))[:, 0]
    avg_psi = _averages(basis_g, basis_f).T.tocsr()   # (R, Q): <psi_R>_Q
    avg_phi = _averages(basis_f, basis_g)             # (R, Q): <phi_Q>_R
    abs_psi = _averages(_abs_basis(basis_g), basis_f).T.tocsr()
    abs_phi = _averages(_abs_basis(basis_f), basis_g)

    w = m.weights
    l1_q = np.asarray(abs(basis_f.matrix) @ w).ravel()
    l1_r = np.asarray(abs(basis_g.matrix) @ w).ravel()
    lo_q, lo_r = basis_f.cube_lo(), basis_g.cube_lo()
    lv_q, lv_r = basis_f.level, basis_g.level
    sq = np.exp2(lv_q.astype(float))
    alpha, dk = T.kernel.alpha, T.kernel.d
    gamma = params.gamma if params is not None else alpha / (2 * (alpha + dk))
    H_r, ncomp = cg.shape[0], cf.shape[1]

    cells: dict[int, Cell] = {}
    table = {k: [] for k in ("code", "n", "j", "main", "corr", "corr_id")} if keep_table else None

    def accumulate(ids, vals, rows, local_mask, stat=None, stat_kind=None):
        if not local_mask.any():
            return
        rr, qq = np.nonzero(local_mask)
        uniq, inv = np.unique(ids[rr, qq], return_inverse=True)
        nb = rows.stop - rows.start
        key = inv * nb + rr
        v = vals[rr, qq]
        counts = np.bincount(inv, minlength=len(uniq))
        ys = []
        for c in range(ncomp):
            z = v * cf[qq, c]
            ys.append(np.bincount(key, z.real, len(uniq) * nb) + 1j * np.bincount(key, z.imag, len(uniq) * nb))
        ys = np.stack(ys, axis=-1).reshape(len(uniq), nb, ncomp)
        smax = None
        if stat is not None:
            smax = np.zeros(len(uniq))
            np.maximum.at(smax, inv, stat[rr, qq])
        for u, cid in enumerate(uniq):
            cid = int(cid)
            cell = cells.get(cid)
            if cell is None:
                tag, n, j = _cell_key(cid)
                cell = cells[cid] = Cell(tag, n, j, y=np.zeros((H_r, ncomp), dtype=complex))
            if stat_kind != "ratio_good":
                cell.count += int(counts[u])
                cell.y[rows] += ys[u]
            if smax is not None:
                if stat_kind == "t":
                    cell.max_t = max(cell.max_t, float(smax[u]))
                elif stat_kind == "ratio_good":
                    cell.max_ratio_good = max(cell.max_ratio_good, float(smax[u]))
                    continue
                else:
                    cell.max_ratio = max(cell.max_ratio, float(smax[u]))

    for s in range(0, H_r, ROW_BLOCK):
        rows = slice(s, min(s + ROW_BLOCK, H_r))
        cls = classify_arrays(lo_q[None], lv_q[None], lo_r[rows, None], lv_r[rows, None], r)
        code, n, j = cls["code"], cls["n"], cls["j"]
        bad = ~good_r[rows, None] | ~good_q[None, :]
        code = np.where(bad, BAD, code)
        n = np.where(bad, lv_r[rows, None] - lv_q[None, :], n)
        j = np.where(bad, 0, j)
        Mb = M[rows]
        cont, tcont = code == CONT, code == TCONT
        corr = np.zeros_like(Mb)
        if cont.any():
            corr += np.where(cont, avg_psi[rows].toarray() * A[None, :], 0)
        if tcont.any():
            corr += np.where(tcont, avg_phi[rows].toarray() * B[rows, None], 0)
        main = Mb - corr
        ids = _cell_id(code, n, j)
        corr_ids = _cell_id(PARA, np.where(cont, n, -n), 0)

        # separated decay statistic t = |T_RQ| D^d / (|psi_R|_1 |phi_Q|_1)
        sep_mask = (code == SEP) | (code == TSEP)
        sr = np.exp2(lv_r[rows].astype(float))[:, None]
        D = sq[None, :] + cls["dist"] + sr
        l1 = l1_r[rows, None] * l1_q[None, :]
        t = np.where(sep_mask, np.abs(Mb) * D ** dk / np.where(l1 > 0, l1, 1.0), 0.0)
        if stat_floor is not None:
            above = (lv_r[rows, None] >= stat_floor) & (lv_q[None, :] >= stat_floor)
            t = np.where(above, t, 0.0)
        accumulate(ids, main, rows, sep_mask, t, "t")

        # contained statistic: |T~| against (small/big)^(alpha/2) (<|psi|> + |psi|_1/mu) |phi|_1
        cmask = cont | tcont
        if cmask.any():
            mu_r = basis_g.mass_q[rows, None]
            mu_q = basis_f.mass_q[None, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                b_c = (sq[None, :] / sr) ** (alpha / 2) * (abs_psi[rows].toarray() + l1_r[rows, None] / mu_r) * l1_q[None, :]
                b_t = (sr / sq[None, :]) ** (alpha / 2) * (abs_phi[rows].toarray() + l1_q[None, :] / mu_q) * l1_r[rows, None]
                ratio = np.where(cont, np.abs(main) / b_c, np.where(tcont, np.abs(main) / b_t, 0.0))
            ratio = np.nan_to_num(ratio, nan=np.inf)
            if stat_floor is not None:
                ratio = np.where(above, ratio, 0.0)
            accumulate(ids, main, rows, cmask, ratio, "ratio")
            # the same statistic over pairs whose small cube keeps clear of the big cube's skeleton
            rr, qq = np.nonzero(cmask)
            gr = rr + rows.start
            big_r = cont[rr, qq]
            s_q, s_r = sq[qq], np.exp2(lv_r[gr].astype(float))
            small_lo = np.where(big_r[:, None], lo_q[qq], lo_r[gr])
            big_lo = np.where(big_r[:, None], lo_r[gr], lo_q[qq])
            s_small, s_big = np.where(big_r, s_q, s_r), np.where(big_r, s_r, s_q)
            thr = s_small ** gamma * s_big ** (1 - gamma)
            clear = np.zeros_like(cmask)
            clear[rr, qq] = skeleton_distance(small_lo, s_small, big_lo, s_big) >= 0.5 * thr
            accumulate(ids, np.zeros_like(main), rows, cmask & clear, ratio, "ratio_good")
            accumulate(corr_ids, corr, rows, cmask)
        accumulate(ids, main, rows, ~sep_mask & ~cmask)
        if keep_table:
            table["code"].append(code)
            table["n"].append(n)
            table["j"].append(j)
            table["main"].append(main)
            table["corr"].append(corr)
            table["corr_id"].append(np.where(cmask, corr_ids, -1))

    for cell in cells.values():
        cell.total = complex(np.sum(cg * cell.y))
    if keep_table:
        table = {k: np.concatenate(v, axis=0) for k, v in table.items()}
        table["terms"] = (table["main"] + table["corr"]) * (cg @ cf.T)
    rel = abs(total - direct) / max(abs(direct), 1e-300) if direct != 0 else abs(total)
    return PairingResult(total, direct, float(rel), cells, basis_f, basis_g, cf, cg, good_q, good_r,
                         int(r), float(alpha), f2, table)


# ------------------------------------------------------------ regimes


@dataclass(frozen=True, eq=False)
class PartReport:
    total: complex
    direct: complex
    rel_err: float
    reconcile_err: float
    class_sums: dict
    cells: list
    decay_slope: float
    decay_points: list
    contained_ratio: dict
    contained_ratio_clear: dict
    fractions: dict = field(default_factory=dict)
    op_norm: float = float("nan")

    def cells_rows(self) -> list[dict]:
        return [{"tag": c.tag, "n": c.n, "j": c.j, "count": c.count, "sum_re": c.total.real,
                 "sum_im": c.total.imag, "abs": abs(c.total), "max_t": c.max_t,
                 "max_ratio": c.max_ratio, "max_ratio_clear": c.max_ratio_good, "rand_norm": c.rand_norm} for c in self.cells]


def separated_decay(cells, max_nj: int = 8) -> tuple[float, list]:
    """Slope of log(max t) over separated cells against n + j (cells with n + j <= max_nj)."""
    pts = sorted((c.n + c.j, c.n, c.j, c.max_t) for c in cells
                 if c.tag == "separated" and c.count > 0 and c.max_t > 0 and c.n + c.j <= max_nj)
    slope = decay_slope([p[0] for p in pts], [math.log(p[3]) for p in pts]) if len(pts) >= 2 else float("nan")
    return slope, [{"n_plus_j": p[0], "n": p[1], "j": p[2], "max_t": p[3]} for p in pts]


def regime_norms(res: PairingResult, p: float = 2.0, q: float = 2.0, sign_trials: int = 8, rng=None,
                 max_nj: int = 8) -> PartReport:
    """Per-cell randomized norms, separated decay regression and contained ratios.

    The randomized norm of a cell is E || b2 sum_R eps_level(R) psi_R y_R ||_p
    over ``sign_trials`` random sign vectors (one sign per level of the g
    basis), divided by ||f||_p; y_R collects that cell's T-coefficients
    against the Haar coefficients of f.
    """
    rng = np.random.default_rng(rng)
    basis_g = res.basis_g
    w = basis_g.measure.weights
    bv2 = basis_g.b.values
    lev = basis_g.level_index()
    L = len(basis_g.tree.levels)
    f_norm = lp_norm(res.f, w, p, q)
    signs = rng.choice((-1.0, 1.0), size=(sign_trials, L))
    PsiT = basis_g.matrix.T.tocsr()
    cells = sorted(res.cells.values(), key=lambda c: (TAGS.index(c.tag), c.n, c.j))
    for c in cells:
        Y = c.y[None, :, :] * signs[:, lev, None]
        S, H, mdim = Y.shape
        out = PsiT @ Y.transpose(1, 0, 2).reshape(H, S * mdim)
        out = bv2[:, None, None] * np.asarray(out).reshape(-1, S, mdim)
        vals = [lp_norm(out[:, s, :], w, p, q) for s in range(S)]
        c.rand_norm = float(np.mean(vals) / f_norm) if f_norm > 0 else 0.0
    slope, pts = separated_decay(cells, max_nj)
    contained, clear = {}, {}
    for c in cells:
        if c.tag in ("contained", "transposed-contained") and c.count:
            key = f"{c.tag}:{c.n}"
            contained[key] = max(contained.get(key, 0.0), c.max_ratio)
            clear[key] = max(clear.get(key, 0.0), c.max_ratio_good)
    return PartReport(res.total, res.direct, res.rel_err, res.reconcile_err,
                      {k: complex(v) for k, v in res.class_sums().items()}, cells, slope, pts, contained, clear)


def contained_refinement_sweep(chain=((4, 8), (5, 10), (6, 12)), seeds=tuple(range(8)), r: int = 3,
                               omega1=(1.0, 0.5), omega2=(-0.5, 1.0)) -> dict:
    """Sup of the contained T~ ratios along Cantor(1/4) refinements with the Cauchy kernel.

    Each seed fixes one set of shift bits for the whole chain, b1 and b2 are
    plane waves (the same functions at every depth) and the statistics only
    look at cubes strictly above the coarsest bottom level, where every depth
    has cancellative functions on nearly the same cube pairs. ``clear`` keeps pairs whose small cube stays half the
    goodness threshold away from the skeleton of the big cube; ``all`` keeps
    every contained pair.
    """
    from .kernel import cauchy_kernel
    from .measure import cantor

    measures = [cantor(0.25, depth, 2) for depth, _ in chain]
    windows = [default_window(mm, levels) for mm, (_, levels) in zip(measures, chain)]
    if len({w.top for w in windows}) != 1:
        raise ValueError("the refinement chain must share its top level")
    # the bottom level of the coarsest measure holds single atoms, with no cancellative functions
    floor = max(w.bottom for w in windows) + 1
    rows = []
    for seed in seeds:
        systems = RandomSystems.draw(2, windows[-1].bottom - 24, windows[0].top - 1, seed)
        for mm, w, (depth, _) in zip(measures, windows, chain):
            b1 = build_accretive("plane_wave", mm, omega=list(omega1))
            b2 = build_accretive("plane_wave", mm, omega=list(omega2))
            T = DiscreteOperator(cauchy_kernel(), mm)
            one = np.ones(mm.n_atoms, dtype=complex)
            res = expand_pairing(one, one, T, systems, b1, b2, w, None, r=r, stat_floor=floor)
            cont = [c for c in res.cells.values() if c.tag in ("contained", "transposed-contained")]
            rows.append({"seed": seed, "depth": depth, "atoms": mm.n_atoms,
                         "clear": max((c.max_ratio_good for c in cont), default=0.0),
                         "all": max((c.max_ratio for c in cont), default=0.0)})
    depths = [d for d, _ in chain]
    sup_clear = [max(x["clear"] for x in rows if x["depth"] == d) for d in depths]
    sup_all = [max(x["all"] for x in rows if x["depth"] == d) for d in depths]
    growth = [b / a if a > 0 else math.inf for a, b in zip(sup_clear, sup_clear[1:])]
    return {"rows": rows, "depths": depths, "stat_floor": floor, "sup_clear": sup_clear, "sup_all": sup_all,
            "growth_clear": growth,
            "growth_all": [b / a if a > 0 else math.inf for a, b in zip(sup_all, sup_all[1:])]}


# ------------------------------------------------------------ good / bad parts


def good_bad_split(f, basis: HaarBasis, good: np.ndarray, p: float = 2.0, q: float = 2.0) -> dict:
    """f_good from the Haar terms of good cubes (top terms included), f_bad from the rest."""
    f2, flat = _as_2d(np.asarray(f, dtype=complex))
    c = np.asarray(basis.coefficients(f2))
    good = np.asarray(good, dtype=bool)
    fg = basis.synthesize(np.where(good[:, None], c, 0))
    fb = basis.synthesize(np.where(good[:, None], 0, c))
    w = basis.measure.weights
    nf = lp_norm(f2, w, p, q)
    out = {"f_good": fg[:, 0] if flat else fg, "f_bad": fb[:, 0] if flat else fb,
           "bad_fraction": lp_norm(fb, w, p, q) / nf if nf > 0 else 0.0,
           "bad_cubes": int((~good).sum())}
    return out


def bad_fraction_sweep(m: AtomicMeasure, f, b, r_values, draws: int, levels: int, rng=None,
                       p: float = 2.0, extra: int = 40, base: Optional[GoodnessParams] = None) -> dict:
    """Mean ||f_bad||_p / ||f||_p over shift draws for each r.

    Goodness looks ``extra`` levels above the window, so large r can still
    mark cubes bad.
    """
    rng = np.random.default_rng(rng)
    window = default_window(m, levels)
    base = base or GoodnessParams()
    out = {r: [] for r in r_values}
    for _ in range(draws):
        systems = draw_systems(m, window, rng, extra=extra)
        basis = build_basis(m, systems.D, b, window.top, window.bottom)
        for r in r_values:
            params = dataclasses.replace(base, r=int(r))
            good = row_goodness(basis, systems, params, primed=False)
            out[r].append(good_bad_split(f, basis, good, p)["bad_fraction"])
    return {r: float(np.mean(v)) for r, v in out.items()}


# ------------------------------------------------------------ operator norm


def _duality(h: np.ndarray, w: np.ndarray, p: float, q: float) -> np.ndarray:
    """Norming functional of h in L^p(mu; l_q) for the bilinear pairing, scaled to unit dual norm."""
    nrm = np.linalg.norm(h, ord=q, axis=1)
    total = float(np.dot(w, nrm ** p)) ** (1 / p)
    if total == 0:
        return np.zeros_like(h)
    with np.errstate(divide="ignore", invalid="ignore"):
        pw = np.where(nrm > 0, nrm ** (p - q), 0.0)
        mag = np.where(np.abs(h) > 0, np.abs(h) ** (q - 2), 0.0)
    return pw[:, None] * mag * np.conj(h) / total ** (p - 1)


def operator_norm_estimate(T: DiscreteOperator, b1=None, b2=None, p: float = 2.0, q: float = 2.0,
                           m_dim: int = 1, probes: int = 4, rng=None, iters: int = 40) -> float:
    """Lower estimate of the norm of f -> b2 T(b1 f) on L^p(mu; l_q^m_dim).

    Each probe starts from a random f and runs the nonlinear power iteration
    f <- J(A^t J(A f)) with the norming maps J of L^p and L^p'; the result is
    the largest ||Af|| / ||f|| seen. Probes are drawn one after another from
    ``rng``, so the first k probes coincide for any larger probe count.
    """
    rng = np.random.default_rng(rng)
    m = T.measure
    n, w = m.n_atoms, m.weights
    if T.kernel.is_zero:
        return 0.0
    bv1 = np.ones(n) if b1 is None else _bvals(b1)
    bv2 = np.ones(n) if b2 is None else _bvals(b2)
    K = T.matrix()
    A = bv2[:, None] * K * (w * bv1)[None, :]
    At = bv1[:, None] * K.T * (w * bv2)[None, :]
    pd = p / (p - 1) if p > 1 else math.inf
    qd = q / (q - 1) if q > 1 else math.inf

    def norm(h):
        return lp_norm(h, w, p, q)

    best = 0.0
    for _ in range(probes):
        f = rng.normal(size=(n, m_dim)) + 1j * rng.normal(size=(n, m_dim))
        for _ in range(iters):
            nf = norm(f)
            if nf == 0:
                break
            f = f / nf
            Af = A @ f
            best = max(best, norm(Af))
            g = _duality(Af, w, p, q)
            f = _duality(At @ g, w, pd, qd) if math.isfinite(pd) else np.sign(At @ g)
    return float(best)


def svd_norm(T: DiscreteOperator) -> float:
    """Spectral norm of W^(1/2) K~ W^(1/2): the L^2(mu) operator norm of T."""
    return float(np.linalg.norm(T.l2_matrix(), 2))


# ------------------------------------------------------------ experiments


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


PRESETS = {
    "cantor-cauchy": {
        "measure": {"kind": "cantor", "ratio": 0.25, "depth": 6, "dim_n": 2},
        "kernel": {"name": "cauchy"},
        "b1": {"kind": "random_phase", "t": 0.5},
        "b2": {"kind": "random_phase", "t": 0.5},
        "goodness": {"r": 8},
        "levels": 12,
        "p": 2.0,
        "X": {"q": 2.0, "m": 1},
        "trials": 8,
        "probes": 2,
        "seed": 0,
    },
    "cantor-cauchy-small": {
        "measure": {"kind": "cantor", "ratio": 0.25, "depth": 4, "dim_n": 2},
        "kernel": {"name": "cauchy"},
        "b1": {"kind": "random_phase", "t": 0.5},
        "b2": {"kind": "random_phase", "t": 0.5},
        "goodness": {"r": 6},
        "levels": 8,
        "p": 2.0,
        "X": {"q": 2.0, "m": 1},
        "trials": 8,
        "probes": 2,
        "seed": 0,
    },
}

_CONFIG_KEYS = {"preset", "measure", "kernel", "b1", "b2", "goodness", "levels", "p", "X", "trials",
                "probes", "seed", "shift_extra", "out"}


@dataclass(frozen=True)
class ExperimentConfig:
    measure: dict
    kernel: dict
    b1: dict
    b2: dict
    goodness: dict
    levels: int
    p: float = 2.0
    X: dict = field(default_factory=lambda: {"q": 2.0, "m": 1})
    trials: int = 8
    probes: int = 2
    seed: int = 0
    shift_extra: int = 0
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("$", "config must be a JSON object")
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        data = {}
        if "preset" in raw:
            if raw["preset"] not in PRESETS:
                raise ConfigError("preset", f"unknown preset {raw['preset']!r}; expected one of {sorted(PRESETS)}")
            data.update(json.loads(json.dumps(PRESETS[raw["preset"]])))
        data.update({k: v for k, v in raw.items() if k != "preset"})
        for key in ("measure", "kernel", "b1", "b2", "levels"):
            if key not in data:
                raise ConfigError(key, "required field missing")
        for key in ("measure", "kernel", "b1", "b2", "goodness", "X"):
            if key in data and not isinstance(data[key], dict):
                raise ConfigError(key, "must be an object")
        for key, lo in (("levels", 2), ("trials", 1), ("probes", 1), ("seed", 0), ("shift_extra", 0)):
            if key in data and (not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < lo):
                raise ConfigError(key, f"must be an integer >= {lo}")
        if not isinstance(data.get("p", 2.0), (int, float)) or not data.get("p", 2.0) > 1:
            raise ConfigError("p", "must be a number > 1")
        X = data.get("X", {"q": 2.0, "m": 1})
        if not isinstance(X.get("q", 2.0), (int, float)) or X.get("q", 2.0) < 1:
            raise ConfigError("X.q", "must be a number >= 1")
        if not isinstance(X.get("m", 1), int) or X.get("m", 1) < 1:
            raise ConfigError("X.m", "must be a positive integer")
        data.setdefault("goodness", {})
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("$", f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def build(self):
        """Measure, kernel and goodness parameters, with field-path errors."""
        try:
            m = measure_from_json(self.measure)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError("measure", str(exc)) from None
        try:
            K = kernel_from_json(self.kernel)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError("kernel", str(exc)) from None
        gp = {"alpha": K.alpha, "d": m.growth_d, **self.goodness}
        try:
            params = GoodnessParams(**gp)
        except TypeError as exc:
            raise ConfigError("goodness", str(exc)) from None
        except ValueError as exc:
            path = "goodness.r" if "violates" in str(exc) else "goodness"
            raise ConfigError(path, str(exc)) from None
        if self.levels <= params.r + 1:
            raise ConfigError("levels", f"window of {self.levels} levels leaves no contained pairs for r={params.r}")
        return m, K, params


def _round(x: float) -> float:
    return float(f"{x:.10g}") if math.isfinite(x) else x


def _clean(obj):
    if isinstance(obj, complex):
        return {"re": _round(obj.real), "im": _round(obj.imag)}
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return _round(x) if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> tuple[PartReport, dict]:
    """Full pipeline from a config; deterministic given the seed.

    Writes summary.json, cells.csv and decay.csv when ``out_dir`` (or
    cfg.out) is set. The summary carries an ``assertions`` map.
    """
    m, K, params = cfg.build()
    rng = np.random.default_rng(cfg.seed)
    window = default_window(m, cfg.levels)
    systems = draw_systems(m, window, rng, extra=cfg.shift_extra)
    try:
        b1 = build_accretive(cfg.b1.get("kind", "one"), m, rng, **{k: v for k, v in cfg.b1.items() if k != "kind"})
    except (TypeError, ValueError) as exc:
        raise ConfigError("b1", str(exc)) from None
    try:
        b2 = build_accretive(cfg.b2.get("kind", "one"), m, rng, **{k: v for k, v in cfg.b2.items() if k != "kind"})
    except (TypeError, ValueError) as exc:
        raise ConfigError("b2", str(exc)) from None
    mdim = int(cfg.X.get("m", 1))
    q = float(cfg.X.get("q", 2.0))
    f = rng.normal(size=(m.n_atoms, mdim)) + 1j * rng.normal(size=(m.n_atoms, mdim))
    g = rng.normal(size=(m.n_atoms, mdim)) + 1j * rng.normal(size=(m.n_atoms, mdim))
    T = DiscreteOperator(K, m)

    res = expand_pairing(g, f, T, systems, b1, b2, window, params)
    rep = regime_norms(res, cfg.p, q, cfg.trials, rng)
    pd = cfg.p / (cfg.p - 1)
    fr_f = good_bad_split(f, res.basis_f, res.good_q, cfg.p, q)
    fr_g = good_bad_split(g, res.basis_g, res.good_r, pd, q)
    op = operator_norm_estimate(T, b1, b2, cfg.p, q, mdim, cfg.probes, rng)
    rep = dataclasses.replace(rep, op_norm=op, fractions={
        "f_bad": fr_f["bad_fraction"], "g_bad": fr_g["bad_fraction"],
        "f_bad_cubes": fr_f["bad_cubes"], "g_bad_cubes": fr_g["bad_cubes"],
        "f_rows": res.basis_f.size, "g_rows": res.basis_g.size})

    slope_bound = -K.alpha / 2 * math.log(2) + 0.15
    cont_max = max(rep.contained_ratio.values(), default=0.0)
    assertions = {
        "expansion_matches_direct": rep.rel_err <= 1e-8,
        "cells_reconcile": rep.reconcile_err <= 1e-8,
        "separated_decay": bool(math.isfinite(rep.decay_slope) and rep.decay_slope <= slope_bound),
        "contained_ratios_finite": bool(math.isfinite(cont_max)),
    }
    summary = _clean({
        "config": cfg.to_dict(),
        "n_atoms": m.n_atoms,
        "window": {"bottom": window.bottom, "top": window.top, "levels": window.n_levels},
        "gamma": params.gamma,
        "min_admissible_r": min_admissible_r(params.gamma, params.lambda_bmo),
        "total": rep.total,
        "direct": rep.direct,
        "rel_err": rep.rel_err,
        "reconcile_err": rep.reconcile_err,
        "class_sums": rep.class_sums,
        "decay_slope": rep.decay_slope,
        "decay_slope_bound": slope_bound,
        "contained_ratio_max": cont_max,
        "contained_ratio": rep.contained_ratio,
        "fractions": rep.fractions,
        "op_norm": op,
        "n_cells": len(rep.cells),
        "assertions": assertions,
    })
    out = out_dir or cfg.out
    if out:
        write_outputs(rep, summary, out)
    return rep, summary


def write_outputs(rep: PartReport, summary: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rows = rep.cells_rows()
    cols = ["tag", "n", "j", "count", "sum_re", "sum_im", "abs", "max_t", "max_ratio", "max_ratio_clear", "rand_norm"]
    with open(out / "cells.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in rows:
            wr.writerow([row[c] if isinstance(row[c], (str, int)) else repr(_round(float(row[c]))) for c in cols])
    with open(out / "decay.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["n_plus_j", "n", "j", "max_t"])
        for pt in rep.decay_points:
            wr.writerow([pt["n_plus_j"], pt["n"], pt["j"], repr(_round(pt["max_t"]))])
