"""b-adapted conditional expectations, martingale differences and Haar functions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dyadic import Cube, DyadicSystem, Filtration, build_tree, _group_sum
from .measure import AccretiveFn, AccretivityViolation, AtomicMeasure


class NoValidChild(ValueError):
    """No child keeps the remaining b-integral above the required bound."""


DELTA_FLOOR_REL = 1e-6


# ------------------------------------------------------------ vector fields


@dataclass(frozen=True)
class VectorField:
    """Atom-indexed values in X = l_q^m (m = 1 is the scalar case)."""

    values: np.ndarray
    q: float = 2.0
    p: float = 2.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("VectorField values must have shape (n_atoms, m)")
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def norm(self, weights: np.ndarray, p: Optional[float] = None) -> float:
        return lp_norm(self.values, weights, self.p if p is None else p, self.q)


def pointwise_norm(values: np.ndarray, q: float = 2.0) -> np.ndarray:
    """l_q norm over the last axis; absolute value for 1-d input."""
    v = np.asarray(values)
    if v.ndim == 1:
        return np.abs(v)
    return np.linalg.norm(v, ord=q, axis=-1)


def lp_norm(values: np.ndarray, weights: np.ndarray, p: float = 2.0, q: float = 2.0) -> float:
    """Norm in L^p(mu; l_q^m)."""
    pn = pointwise_norm(values, q)
    if math.isinf(p):
        return float(pn.max(initial=0.0))
    return float(np.dot(weights, pn ** p) ** (1.0 / p))


def _as_2d(f: np.ndarray) -> tuple[np.ndarray, bool]:
    f = np.asarray(f)
    return (f[:, None], True) if f.ndim == 1 else (f, False)


def _bvals(b) -> np.ndarray:
    return b.values if isinstance(b, AccretiveFn) else np.asarray(b, dtype=complex)


def _delta_floor(b) -> float:
    delta = b.delta if isinstance(b, AccretiveFn) else 1.0
    return DELTA_FLOOR_REL * delta


# --------------------------------------------- twisted expectations


def _level_labels(m: AtomicMeasure, system: DyadicSystem, k: int) -> tuple[np.ndarray, int]:
    coords = system.coords_of_points(m.points, k)
    _, inv = np.unique(coords, axis=0, return_inverse=True)
    inv = inv.ravel()
    return inv, int(inv.max()) + 1


def cond_expectation(f, b, k: int, system: DyadicSystem, m: AtomicMeasure) -> np.ndarray:
    """E_k^b f = b * (int_Q f) / (int_Q b) on every level-k cube Q.

    Every cube met by the labelling carries atoms, so no zero-mass branch is
    needed. Raises AccretivityViolation on cubes with |int_Q b| below the floor.
    """
    f2, flat = _as_2d(f)
    bv = _bvals(b)
    lab, n = _level_labels(m, system, k)
    mass = np.bincount(lab, m.weights, n)
    bint = _group_sum(lab, m.weights * bv, n)
    if np.any(np.abs(bint) < _delta_floor(b) * mass):
        raise AccretivityViolation(f"b is not weakly accretive at level {k}")
    fint = _group_sum(lab, m.weights[:, None] * f2, n)
    out = bv[:, None] * (fint / bint[:, None])[lab]
    return out[:, 0] if flat else out


def martingale_difference(f, b, k: int, system: DyadicSystem, m: AtomicMeasure) -> np.ndarray:
    """D_k^b f = E_{k-1}^b f - E_k^b f."""
    return cond_expectation(f, b, k - 1, system, m) - cond_expectation(f, b, k, system, m)


# ------------------------------------------------------ subcube ordering


def order_subcubes(child_bint, mu_q: float, delta: Optional[float] = None, rtol: float = 1e-12) -> list[int]:
    """Order the 2^N children so every tail keeps a large b-integral.

    ``child_bint`` lists int_{Q_e} b over all 2^N children in lexicographic
    position order (zero for empty children). At step j the child whose
    removal leaves the largest |remaining integral| is removed, provided that
    value is at least (1 - j 2^-N) delta mu(Q); ties go to the lexicographically
    first child. The returned list is Q_1, ..., Q_{2^N}.
    """
    c = np.asarray(child_bint, dtype=complex)
    M = len(c)
    if M & (M - 1) or M < 2:
        raise ValueError("expected 2^N child integrals")
    if delta is None:
        delta = abs(c.sum()) / mu_q
    remaining = list(range(M))
    order = []
    for j in range(1, M):
        total = c[remaining].sum()
        tails = np.abs(total - c[remaining])
        need = (1 - j / M) * delta * mu_q
        best = tails.max()
        if best < need * (1 - rtol):
            raise NoValidChild(f"step {j}: best tail {best:.3g} below {need:.3g}; lower delta")
        pick = remaining[int(np.nonzero(tails >= best * (1 - rtol))[0][0])]
        order.append(pick)
        remaining.remove(pick)
    order.append(remaining[0])
    return order


def subaccretive_margins(ordered_bint, mu_q: float, delta: float) -> np.ndarray:
    """|int over Q_k-hat of b| - [1 - (k-1) 2^-N] delta mu(Q) for k = 1..2^N."""
    c = np.asarray(ordered_bint, dtype=complex)
    M = len(c)
    tails = np.abs(np.cumsum(c[::-1])[::-1])
    return tails - (1 - np.arange(M) / M) * delta * mu_q


def haar_coefficients(ordered_bint, u: int) -> tuple[complex, complex]:
    """Values of phi_{Q,u} on Q_u and on Q_{u+1}-hat (u = 1..2^N - 1)."""
    c = np.asarray(ordered_bint, dtype=complex)
    b_u = c[u - 1]
    b_hat_next = c[u:].sum()
    b_hat = b_u + b_hat_next
    amp = np.sqrt(b_u * b_hat_next / b_hat)
    return amp / b_u, -amp / b_hat_next


# ------------------------------------------------------------ Haar functions


@dataclass(frozen=True)
class HaarFunction:
    cube: Cube
    u: int
    support: np.ndarray
    values: np.ndarray
    cancellative: bool
    b_ref: Optional[AccretiveFn] = field(default=None, repr=False)

    def full(self, n_atoms: int) -> np.ndarray:
        out = np.zeros(n_atoms, dtype=complex)
        out[self.support] = self.values
        return out

    @property
    def is_zero(self) -> bool:
        return len(self.support) == 0


def build_haar(Q: Cube, u: int, b, m: AtomicMeasure, delta: Optional[float] = None) -> HaarFunction:
    """phi_{Q,u} built from cube geometry (independent of any filtration)."""
    bv = _bvals(b)
    inside = Q.contains_points(m.points)
    if u == 0:
        bq = np.dot(m.weights[inside], bv[inside])
        if abs(bq) < _delta_floor(b) * m.weights[inside].sum():
            raise AccretivityViolation("degenerate cube average of b")
        idx = np.nonzero(inside)[0]
        return HaarFunction(Q, 0, idx, np.full(len(idx), bq ** -0.5), False, b if isinstance(b, AccretiveFn) else None)
    kids = Q.system.children(Q)
    masks = [k.contains_points(m.points) & inside for k in kids]
    bint = np.array([np.dot(m.weights[mk], bv[mk]) for mk in masks])
    mass = np.array([m.weights[mk].sum() for mk in masks])
    mu_q = mass.sum()
    for bi, mi in zip(bint, mass):
        if mi > 0 and abs(bi) < _delta_floor(b) * mi:
            raise AccretivityViolation("degenerate child average of b")
    order = order_subcubes(bint, mu_q, delta)
    if mass[order[u - 1]] == 0:
        return HaarFunction(Q, u, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=complex), True,
                            b if isinstance(b, AccretiveFn) else None)
    a_in, a_out = haar_coefficients(bint[order], u)
    in_mask = masks[order[u - 1]]
    out_mask = np.zeros(m.n_atoms, dtype=bool)
    for pos in order[u:]:
        out_mask |= masks[pos]
    vals = np.zeros(m.n_atoms, dtype=complex)
    vals[in_mask] = a_in
    vals[out_mask] = a_out
    idx = np.nonzero(in_mask | out_mask)[0]
    return HaarFunction(Q, u, idx, vals[idx], True, b if isinstance(b, AccretiveFn) else None)


@dataclass(eq=False)
class HaarBasis:
    """All nonzero Haar functions of a system between the atom scale and ``top_level``.

    Row h of ``matrix`` holds phi_h on the atoms. The metadata arrays give,
    per row, the level of its cube Q, the block index of Q in the tree, the
    index u, the tree block of Q_u (-1 when u = 0) and the masses of Q_u,
    Q_{u+1}-hat and Q.
    """

    measure: AtomicMeasure
    b: AccretiveFn
    tree: Filtration
    matrix: sp.csr_matrix
    level: np.ndarray
    block: np.ndarray
    u: np.ndarray
    child_block: np.ndarray
    mass_u: np.ndarray
    mass_hat: np.ndarray
    mass_q: np.ndarray
    value_in: np.ndarray
    value_out: np.ndarray
    orderings: dict
    min_margin: float

    @property
    def system(self) -> DyadicSystem:
        return self.tree.system

    @property
    def top_level(self) -> int:
        return int(self.tree.levels[-1])

    @property
    def bottom_level(self) -> int:
        return int(self.tree.levels[0])

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def cancellative(self) -> np.ndarray:
        return self.u > 0

    def level_index(self) -> np.ndarray:
        return self.level - self.bottom_level

    def cube(self, h: int) -> Cube:
        return self.tree.cube(int(self.level[h] - self.bottom_level), int(self.block[h]))

    def cube_lo(self) -> np.ndarray:
        """Lower corners of the cubes Q of every row."""
        sysm = self.system
        out = np.empty((self.size, sysm.dim_n))
        for i, k in enumerate(self.tree.levels):
            rows = np.nonzero(self.level == k)[0]
            if len(rows):
                out[rows] = sysm.offset(int(k)) + 2.0 ** int(k) * self.tree.block_coords[i][self.block[rows]]
        return out

    def function(self, h: int) -> HaarFunction:
        row = self.matrix.getrow(h)
        return HaarFunction(self.cube(h), int(self.u[h]), row.indices.copy(), row.data.copy(),
                            bool(self.u[h] > 0), self.b)

    def coefficients(self, f) -> np.ndarray:
        """<phi_h, f> = int phi_h f dmu for every row (bilinear, no conjugation)."""
        f2, _ = _as_2d(f)
        return self.matrix @ (self.measure.weights[:, None] * f2)

    def synthesize(self, coeffs, b: Optional[np.ndarray] = None) -> np.ndarray:
        """sum_h b phi_h c_h."""
        c2, flat = _as_2d(coeffs)
        bv = self.b.values if b is None else b
        out = bv[:, None] * (self.matrix.T @ c2)
        return out[:, 0] if flat else out

    def projection_by_level(self, f, k: int) -> np.ndarray:
        """D_k^b f through the rank-one sum over rows with cubes at level k."""
        c = self.coefficients(f)
        c[(self.level != k) | (self.u == 0)] = 0
        return self.synthesize(c if np.ndim(f) > 1 else c[:, 0])


def build_basis(m: AtomicMeasure, system: DyadicSystem, b: AccretiveFn, top_level: int,
                bottom_level: Optional[int] = None, delta: Optional[float] = None,
                tree: Optional[Filtration] = None) -> HaarBasis:
    """Construct every nonzero phi_{Q,u} with levels up to ``top_level``.

    ``delta`` fixes the accretivity constant used for ordering; by default each
    cube uses its own |int_Q b| / mu(Q). Children without atoms never appear,
    which matches phi = 0 for empty Q_u (empty children are removed first by
    the greedy ordering because their removal leaves the tail unchanged).
    """
    if tree is None:
        tree = build_tree(m.points, m.weights, system, top_level, bottom_level)
    bv = b.values
    w = m.weights
    floor = _delta_floor(b)
    n_dim = system.dim_n
    M = 2 ** n_dim
    rows, cols, vals = [], [], []
    meta = {k: [] for k in ("level", "block", "u", "child", "mu_u", "mu_hat", "mu_q", "a_in", "a_out")}
    orderings = {}
    min_margin = math.inf
    nrow = 0

    prev_mass = tree.block_mass(0)
    prev_bint = _group_sum(tree.labels[0], w * bv, tree.n_blocks(0))
    if np.any(np.abs(prev_bint) < floor * prev_mass):
        raise AccretivityViolation("b is not weakly accretive at the bottom level")
    lab_prev = tree.labels[0]
    order_prev = np.argsort(lab_prev, kind="stable")
    starts_prev = np.concatenate([[0], np.cumsum(np.bincount(lab_prev, minlength=tree.n_blocks(0)))])

    for i in range(1, len(tree.levels)):
        k = int(tree.levels[i])
        nb = tree.n_blocks(i)
        mass = tree.block_mass(i)
        bint = _group_sum(tree.labels[i], w * bv, nb)
        if np.any(np.abs(bint) < floor * mass):
            raise AccretivityViolation(f"b is not weakly accretive at level {k}")
        parent = tree.parent_of_blocks(i - 1)
        pos = system.child_position(tree.block_coords[i - 1], k - 1)
        pos_index = (pos * (2 ** np.arange(n_dim - 1, -1, -1))).sum(axis=1)
        kids_sorted = np.argsort(parent, kind="stable")
        counts = np.bincount(parent, minlength=nb)
        kstarts = np.concatenate([[0], np.cumsum(counts)])
        for P in np.nonzero(counts >= 2)[0]:
            kids = kids_sorted[kstarts[P]:kstarts[P + 1]]
            full = np.zeros(M, dtype=complex)
            full[pos_index[kids]] = prev_bint[kids]
            block_of_pos = np.full(M, -1)
            block_of_pos[pos_index[kids]] = kids
            d_q = abs(bint[P]) / mass[P] if delta is None else delta
            order = order_subcubes(full, mass[P], d_q)
            orderings[(k, int(P))] = [int(x) for x in order]
            min_margin = min(min_margin, float(subaccretive_margins(full[order], mass[P], d_q).min()))
            ordered_blocks = block_of_pos[order]
            for uu in range(1, M):
                cb = ordered_blocks[uu - 1]
                if cb < 0:
                    continue
                a_in, a_out = haar_coefficients(full[order], uu)
                rest = [x for x in ordered_blocks[uu:] if x >= 0]
                atoms_in = order_prev[starts_prev[cb]:starts_prev[cb + 1]]
                atoms_out = np.concatenate([order_prev[starts_prev[x]:starts_prev[x + 1]] for x in rest])
                rows.append(np.full(len(atoms_in) + len(atoms_out), nrow))
                cols.append(np.concatenate([atoms_in, atoms_out]))
                vals.append(np.concatenate([np.full(len(atoms_in), a_in), np.full(len(atoms_out), a_out)]))
                mu_hat = float(prev_mass[rest].sum())
                for key, val in zip(meta, (k, P, uu, cb, prev_mass[cb], mu_hat, mass[P], a_in, a_out)):
                    meta[key].append(val)
                nrow += 1
        lab_prev = tree.labels[i]
        order_prev = np.argsort(lab_prev, kind="stable")
        starts_prev = np.concatenate([[0], np.cumsum(np.bincount(lab_prev, minlength=nb))])
        prev_mass, prev_bint = mass, bint

    # non-cancellative functions on the top cubes
    top = len(tree.levels) - 1
    for P in range(tree.n_blocks(top)):
        atoms = order_prev[starts_prev[P]:starts_prev[P + 1]]
        val = prev_bint[P] ** -0.5
        rows.append(np.full(len(atoms), nrow))
        cols.append(atoms)
        vals.append(np.full(len(atoms), val))
        for key, v in zip(meta, (int(tree.levels[top]), P, 0, -1, prev_mass[P], 0.0, prev_mass[P], val, 0.0)):
            meta[key].append(v)
        nrow += 1

    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(nrow, m.n_atoms), dtype=complex)
    mat.sort_indices()
    return HaarBasis(
        measure=m, b=b, tree=tree, matrix=mat,
        level=np.array(meta["level"], dtype=np.int64), block=np.array(meta["block"], dtype=np.int64),
        u=np.array(meta["u"], dtype=np.int64), child_block=np.array(meta["child"], dtype=np.int64),
        mass_u=np.array(meta["mu_u"], dtype=float), mass_hat=np.array(meta["mu_hat"], dtype=float),
        mass_q=np.array(meta["mu_q"], dtype=float), value_in=np.array(meta["a_in"], dtype=complex),
        value_out=np.array(meta["a_out"], dtype=complex), orderings=orderings,
        min_margin=min_margin if math.isfinite(min_margin) else 0.0)


# ---------------------------------------------------------- diagnostics


def verify_haar_norms(phi: HaarFunction, m: AtomicMeasure, b=None) -> dict:
    """Integrals, L^p norms and the two-sided pointwise profile of a Haar function.

    The profile is sqrt(mu(Q_u)) (1_{Q_u}/mu(Q_u) + 1_{Q_{u+1}-hat}/mu(Q));
    ``pointwise_lo``/``pointwise_hi`` are the extreme ratios |phi| / profile.
    """
    if phi.is_zero:
        raise ValueError("verify_haar_norms needs a nonzero Haar function")
    b = phi.b_ref if b is None else b
    bv = _bvals(b)
    w = m.weights[phi.support]
    v = phi.values
    absv = np.abs(v)
    int_bphi = complex(np.dot(w, bv[phi.support] * v))
    int_bphi2 = complex(np.dot(w, bv[phi.support] * v * v))
    mu_q = float(m.weights[phi.cube.contains_points(m.points)].sum())
    if phi.cancellative:
        a_in = v[0]
        in_mask = np.isclose(v, a_in, rtol=1e-13, atol=0)
        # values on Q_u and on the hat set differ, otherwise the function would vanish
        mu_u = float(w[in_mask].sum())
        profile = np.where(in_mask, 1 / mu_u, 1 / mu_q) * math.sqrt(mu_u)
    else:
        mu_u = mu_q
        profile = np.full(len(v), 1 / math.sqrt(mu_q))
    ratio = absv / profile
    norms = {1: float(np.dot(w, absv)), 2: float(math.sqrt(np.dot(w, absv ** 2))), math.inf: float(absv.max())}
    return {
        "int_bphi": int_bphi,
        "int_bphi2": int_bphi2,
        "norms": norms,
        "norm_ratios": {p: norms[p] / mu_u ** ((0.0 if math.isinf(p) else 1 / p) - 0.5) for p in norms},
        "l1_linf_product": norms[1] * norms[math.inf],
        "pointwise_lo": float(ratio.min()),
        "pointwise_hi": float(ratio.max()),
        "mu_u": mu_u,
        "mu_q": mu_q,
    }


def haar_identity_errors(basis: HaarBasis) -> dict:
    """Worst |int b phi| and |int b phi^2 - 1| over cancellative rows, plus margins."""
    w = basis.measure.weights
    bw = basis.b.values * w
    M = basis.matrix
    canc = basis.u > 0
    first = np.abs(M @ bw)[canc]
    second = np.abs(M.multiply(M) @ bw - 1)[canc]
    return {
        "max_abs_int_bphi": float(first.max(initial=0.0)),
        "max_rel_int_bphi2": float(second.max(initial=0.0)),
        "n_cancellative": int(canc.sum()),
        "min_subaccretive_margin": basis.min_margin,
    }


@dataclass
class Decomposition:
    coefficients: np.ndarray
    basis: HaarBasis
    top_level: int
    bottom_level: int
    flat: bool = False

    def to_csv(self, path) -> None:
        bs = self.basis
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            m = self.coefficients.shape[1]
            wr.writerow(["level", "coords", "u"] + [f"re{i}" for i in range(m)] + [f"im{i}" for i in range(m)])
            for h in range(bs.size):
                coords = bs.tree.block_coords[int(bs.level[h] - bs.bottom_level)][bs.block[h]]
                c = self.coefficients[h]
                wr.writerow([int(bs.level[h]), " ".join(map(str, coords)), int(bs.u[h])]
                            + [repr(float(x)) for x in c.real] + [repr(float(x)) for x in c.imag])


def decompose(f, basis: HaarBasis) -> Decomposition:
    coeffs = basis.coefficients(f)
    return Decomposition(coeffs, basis, basis.top_level, basis.bottom_level, np.ndim(f) == 1)


def reconstruct(dec: Decomposition) -> np.ndarray:
    out = dec.basis.synthesize(dec.coefficients)
    return out[:, 0] if dec.flat else out


def unconditionality_estimate(f, basis: HaarBasis, p: float = 2.0, q: float = 2.0,
                              trials: int = 64, rng=None) -> float:
    """Max over random level signs of ||sum_k eps_k D_k^b f + eps E_m^b f|| / ||f||."""
    rng = np.random.default_rng(rng)
    f2, _ = _as_2d(f)
    w = basis.measure.weights
    denom = lp_norm(f2, w, p, q)
    if denom == 0:
        return 0.0
    coeffs = basis.coefficients(f2)
    # group index: one sign per level, the top non-cancellative terms get their own
    group = basis.level - basis.bottom_level
    group = np.where(basis.u == 0, group.max(initial=0) + 1, group)
    n_groups = int(group.max(initial=0)) + 1
    best = 0.0
    for _ in range(trials):
        eps = rng.choice((-1.0, 1.0), size=n_groups)
        val = lp_norm(basis.synthesize(coeffs * eps[group][:, None]), w, p, q)
        best = max(best, val / denom)
    return best
