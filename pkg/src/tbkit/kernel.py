"""Calderon-Zygmund kernels, truncated atom operators and matrix coefficients."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dyadic import Cube, box_distance
from .haar import HaarFunction, _as_2d, _bvals
from .measure import AtomicMeasure

BLOCK = 512


# ------------------------------------------------------------------ kernels


def _cauchy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = (x[:, None, 0] - y[None, :, 0]) + 1j * (x[:, None, 1] - y[None, :, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return 1.0 / z


def _hilbert(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return (1.0 / (x[:, None, 0] - y[None, :, 0])).astype(complex)


def _odd(d: float, axis: int) -> Callable:
    """(x - y)_axis / |x - y|^(d + 1), an odd kernel of order d in any dimension."""

    def ev(x, y):
        diff = x[:, None, :] - y[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        with np.errstate(divide="ignore", invalid="ignore"):
            return (diff[..., axis] / r ** (d + 1)).astype(complex)

    return ev


def _constant(c: complex) -> Callable:
    def ev(x, y):
        return np.full((len(x), len(y)), complex(c))

    return ev


@dataclass(frozen=True)
class KernelSpec:
    """Kernel K(x, y) with size order d and Holder exponent alpha.

    ``fn`` maps point arrays X (n, N), Y (m, N) to the (n, m) complex matrix of
    kernel values; entries with x = y are ignored by every caller.
    """

    d: float
    alpha: float
    fn: Callable = field(repr=False, compare=False)
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)
    dim_n: Optional[int] = None

    def __post_init__(self):
        if not (0 < self.alpha <= 1):
            raise ValueError(f"alpha must lie in (0, 1]; got {self.alpha}")
        if self.d <= 0:
            raise ValueError("d must be positive")

    def __call__(self, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.fn(x, y)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}


def cauchy_kernel() -> KernelSpec:
    """1/(z - w) on R^2 identified with C."""
    return KernelSpec(1.0, 1.0, _cauchy, "cauchy", {}, 2)


def hilbert_kernel() -> KernelSpec:
    return KernelSpec(1.0, 1.0, _hilbert, "hilbert", {}, 1)


def odd_kernel(d: float = 1.0, axis: int = 0) -> KernelSpec:
    return KernelSpec(float(d), 1.0, _odd(float(d), int(axis)), "odd", {"d": d, "axis": axis})


def zero_kernel(d: float = 1.0) -> KernelSpec:
    return KernelSpec(float(d), 1.0, _constant(0.0), "zero", {"d": d})


def constant_kernel(c: float = 1.0, d: float = 1.0) -> KernelSpec:
    """Constant kernel; not a CZ kernel, used only to calibrate weak boundedness."""
    return KernelSpec(float(d), 1.0, _constant(c), "constant", {"c": c, "d": d})


_KERNELS = {
    "cauchy": cauchy_kernel,
    "hilbert": hilbert_kernel,
    "odd": odd_kernel,
    "zero": zero_kernel,
    "constant": constant_kernel,
}


def build_kernel(name: str, **params) -> KernelSpec:
    if name not in _KERNELS:
        raise ValueError(f"unknown kernel {name!r}; expected one of {sorted(_KERNELS)}")
    return _KERNELS[name](**params)


def kernel_from_json(spec) -> KernelSpec:
    if isinstance(spec, (str, Path)):
        text = Path(spec).read_text() if Path(str(spec)).exists() else str(spec)
        spec = json.loads(text)
    spec = dict(spec)
    return build_kernel(spec.pop("name"), **spec)


def czk_check(K: KernelSpec, n_samples: int = 10000, rng=None, dim_n: Optional[int] = None,
              scale: float = 1.0) -> dict:
    """Sampled size and Holder quotients of K.

    Size: |K(x,y)| |x-y|^d. Holder: the larger of |K(x,y) - K(x',y)| and
    |K(y,x) - K(y,x')|, times |x-y|^(d+alpha) / |x-x'|^alpha, over triples
    with |x - y| > 2 |x - x'|.
    """
    rng = np.random.default_rng(rng)
    n = dim_n or K.dim_n or 1
    x = rng.uniform(-scale, scale, (n_samples, n))
    y = rng.uniform(-scale, scale, (n_samples, n))
    r = np.linalg.norm(x - y, axis=1)
    u = rng.normal(size=(n_samples, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    h = r * rng.uniform(0.0, 0.5, n_samples) * (1 - 1e-9)
    xp = x + u * h[:, None]
    keep = (r > 0) & (h > 0)
    x, y, xp, r, h = x[keep], y[keep], xp[keep], r[keep], h[keep]

    def diag(a, b):
        # K on matched rows, evaluated in small square blocks
        return np.concatenate([np.diagonal(K(a[s:s + 64], b[s:s + 64])) for s in range(0, len(a), 64)] or [[]])

    kxy = diag(x, y)
    size = np.abs(kxy) * r ** K.d
    d1 = np.abs(kxy - diag(xp, y))
    d2 = np.abs(diag(y, x) - diag(y, xp))
    hold = np.maximum(d1, d2) * r ** (K.d + K.alpha) / h ** K.alpha
    return {"worst_size_ratio": float(size.max(initial=0.0)),
            "worst_holder_ratio": float(hold.max(initial=0.0)),
            "samples": int(len(r))}


# ---------------------------------------------------------------- operators


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """(Tf)(x_i) = sum over |x_i - x_j| >= eps of w_j K(x_i, x_j) f(x_j).

    ``truncation_eps`` defaults to half the minimal atom separation, so every
    off-diagonal pair is kept and only the diagonal is dropped.
    """

    kernel: KernelSpec
    measure: AtomicMeasure
    truncation_eps: Optional[float] = None

    def __post_init__(self):
        eps = self.truncation_eps
        if eps is None:
            sep = self.measure.min_separation()
            eps = 0.5 * sep if math.isfinite(sep) else 1.0
        if not eps > 0:
            raise ValueError("truncation_eps must be positive")
        object.__setattr__(self, "truncation_eps", float(eps))

    @property
    def n(self) -> int:
        return self.measure.n_atoms

    def rows(self, idx, cols=None) -> np.ndarray:
        """Truncated kernel block K~[idx, cols] (all columns by default)."""
        pts = self.measure.points
        idx = np.asarray(idx)
        cols = np.arange(self.n) if cols is None else np.asarray(cols)
        x, y = pts[idx], pts[cols]
        if self.kernel.is_zero:
            return np.zeros((len(idx), len(cols)), dtype=complex)
        k = np.asarray(self.kernel.fn(x, y), dtype=complex)
        diff = x[:, None, :] - y[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        k[dist < self.truncation_eps] = 0
        return k

    def matrix(self) -> np.ndarray:
        return self.rows(np.arange(self.n))

    def _apply(self, f, transpose: bool, conj: bool):
        f2, flat = _as_2d(f)
        wf = self.measure.weights[:, None] * f2
        out = np.zeros((self.n, f2.shape[1]), dtype=complex)
        for s in range(0, self.n, BLOCK):
            idx = np.arange(s, min(s + BLOCK, self.n))
            blk = self.rows(idx)
            if conj:
                blk = blk.conj()
            if transpose:
                out += blk.T @ wf[idx]
            else:
                out[idx] = blk @ wf
        return out[:, 0] if flat else out

    def apply(self, f) -> np.ndarray:
        return self._apply(f, transpose=False, conj=False)

    def apply_adjoint(self, g) -> np.ndarray:
        """T* for the sesquilinear pairing sum w conj(g) Tf."""
        return self._apply(g, transpose=True, conj=True)

    def apply_transpose(self, g) -> np.ndarray:
        """T^t for the bilinear pairing sum w g Tf."""
        return self._apply(g, transpose=True, conj=False)

    def l2_matrix(self) -> np.ndarray:
        """W^(1/2) K~ W^(1/2): its spectral norm is the L^2(mu) operator norm."""
        s = np.sqrt(self.measure.weights)
        return s[:, None] * self.matrix() * s[None, :]


def pairing(m: AtomicMeasure, g, f) -> complex:
    """Bilinear <g, f> = sum w g f, summed over components for vector data."""
    g2, _ = _as_2d(g)
    f2, _ = _as_2d(f)
    return complex(np.sum(m.weights[:, None] * g2 * f2))


def inner(m: AtomicMeasure, g, f) -> complex:
    """Sesquilinear (g, f) = sum w conj(g) f."""
    return pairing(m, np.conj(g), f)


# ----------------------------------------------------- matrix coefficients


def bilinear_form(T: DiscreteOperator, left, right, rows=None, cols=None) -> complex:
    """sum_ij w_i left_i K~_ij w_j right_j over the given atom subsets."""
    w = T.measure.weights
    rows = np.arange(T.n) if rows is None else np.asarray(rows)
    cols = np.arange(T.n) if cols is None else np.asarray(cols)
    if len(rows) == 0 or len(cols) == 0:
        return 0j
    left = np.broadcast_to(left, (T.n,))
    right = np.broadcast_to(right, (T.n,))
    total = 0j
    for s in range(0, len(rows), BLOCK):
        r = rows[s:s + BLOCK]
        total += (w[r] * left[r]) @ (T.rows(r, cols) @ (w[cols] * right[cols]))
    return complex(total)


def matrix_coeff(T: DiscreteOperator, psi: HaarFunction, phi: HaarFunction, b1, b2) -> complex:
    """T_RQ = <psi b2, T(b1 phi)> as an exact double sum over the two supports.

    The pairing is bilinear, so the value is linear in both Haar functions.
    """
    if psi.is_zero or phi.is_zero:
        return 0j
    n = T.n
    left = psi.full(n) * _bvals(b2)
    right = phi.full(n) * _bvals(b1)
    return bilinear_form(T, left, right, psi.support, phi.support)


def pair_matrix(T: DiscreteOperator, psi_mat, phi_mat, b1, b2) -> np.ndarray:
    """All coefficients Psi diag(w b2) K~ diag(w b1) Phi^T at once.

    ``psi_mat`` and ``phi_mat`` are sparse (rows = Haar functions, cols = atoms).
    The kernel is formed in row blocks so only one block is held at a time.
    """
    w = T.measure.weights
    right = (phi_mat.multiply((w * _bvals(b1))[None, :])).T.tocsr()
    G = np.zeros((T.n, phi_mat.shape[0]), dtype=complex)
    for s in range(0, T.n, BLOCK):
        idx = np.arange(s, min(s + BLOCK, T.n))
        G[idx] = (right.T @ T.rows(idx).T).T
    left = psi_mat.multiply((w * _bvals(b2))[None, :]).tocsr()
    return np.asarray(left @ G)


# ------------------------------------------------------------ decay checks


def l1_norm(h: HaarFunction, m: AtomicMeasure) -> float:
    return float(np.dot(m.weights[h.support], np.abs(h.values)))


def decay_separated(T: DiscreteOperator, pairs, b1, b2, good=None) -> list[dict]:
    """Per-pair ratios against the two separated-cube bounds.

    ``pairs`` holds (psi_R, phi_Q) Haar functions with l(Q) <= dist(Q,R) ^ l(R).
    The first bound is l(Q)^alpha / dist^(d+alpha) times the L^1 norms, the
    second l(Q)^(alpha/2) l(R)^(alpha/2) / D^(d+alpha) times the L^1 norms,
    where D = l(Q) + dist + l(R); the second is only evaluated when ``good``
    flags Q as good. Pairs outside the hypothesis are returned with
    ``skipped`` set.
    """
    m = T.measure
    a, d = T.kernel.alpha, T.kernel.d
    rows = []
    for i, (psi, phi) in enumerate(pairs):
        Q, R = phi.cube, psi.cube
        dist = box_distance(Q.lo, Q.hi, R.lo, R.hi)
        D = Q.side + dist + R.side
        row = {"q_level": Q.level, "r_level": R.level, "dist": dist, "long_distance": D,
               "n": R.level - Q.level, "j": max(0, math.ceil(math.log2(D / R.side) - 1e-12) - 1)}
        if not (Q.side <= min(dist, R.side)) or phi.is_zero or psi.is_zero:
            rows.append({**row, "skipped": True, "coeff": 0.0, "ratio_sep": 0.0, "ratio_long": 0.0})
            continue
        c = matrix_coeff(T, psi, phi, b1, b2)
        norms = l1_norm(psi, m) * l1_norm(phi, m)
        rhs1 = Q.side ** a / dist ** (d + a) * norms
        rhs2 = (Q.side * R.side) ** (a / 2) / D ** (d + a) * norms
        use2 = good is None or bool(good[i])
        rows.append({**row, "skipped": False, "coeff": abs(c), "l1_product": norms,
                     "ratio_sep": abs(c) / rhs1, "ratio_long": abs(c) / rhs2 if use2 else float("nan")})
    return rows


def decay_slope(x, y) -> float:
    """Least-squares slope of y against x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def average_over(h: HaarFunction, m: AtomicMeasure, mask: np.ndarray) -> complex:
    """mu-average of the Haar function over the atoms in ``mask``."""
    mass = m.weights[mask].sum()
    if mass == 0:
        raise ValueError("average over an empty set")
    return complex(np.dot(m.weights[mask], h.full(m.n_atoms)[mask]) / mass)


def decay_contained(T: DiscreteOperator, psi: HaarFunction, phi: HaarFunction, b1, b2) -> dict:
    """Corrected coefficient for Q inside a much larger R, with both bounds.

    T~ = T_RQ - <b2, T(b1 phi)> <psi>_Q is also recomputed through the split
    over the half-side children of R: the child S containing Q contributes
    through -<psi>_S <1_{S^c} b2, T(b1 phi)>, the other children S' through
    <psi 1_{S'} b2, T(b1 phi)>.
    """
    m = T.measure
    n = m.n_atoms
    Q, R = phi.cube, psi.cube
    bv1, bv2 = _bvals(b1), _bvals(b2)
    pts = m.points
    in_q = Q.contains_points(pts)
    in_r = R.contains_points(pts)
    kids = R.system.children(R)
    kid_masks = [k.contains_points(pts) & in_r for k in kids]
    # S is the child holding Q's atoms (the first atom decides if Q straddles)
    q_atoms = np.nonzero(in_q)[0]
    s_pos = next(i for i, mk in enumerate(kid_masks) if mk[q_atoms[0]])
    S_mask = kid_masks[s_pos]

    psi_full = psi.full(n)
    right = bv1 * phi.full(n)
    everything = np.arange(n)
    coeff = bilinear_form(T, psi_full * bv2, right, psi.support, phi.support)
    global_corr = bilinear_form(T, bv2, right, everything, phi.support)
    avg_q = average_over(psi, m, in_q)
    tilde = coeff - global_corr * avg_q

    avg_s = average_over(psi, m, S_mask)
    split = -avg_s * bilinear_form(T, bv2, right, np.nonzero(~S_mask)[0], phi.support)
    for i, mk in enumerate(kid_masks):
        if i != s_pos and mk.any():
            split += bilinear_form(T, psi_full * bv2, right, np.nonzero(mk)[0], phi.support)

    a = T.kernel.alpha
    ratio_side = (Q.side / R.side) ** (a / 2)
    mu_r = m.weights[in_r].sum()
    mu_s = m.weights[S_mask].sum()
    bound = ratio_side * (abs(avg_s) + l1_norm(psi, m) / mu_r) * l1_norm(phi, m)
    # pointwise: |psi(x) T~ phi(y)| against (l(Q)/l(R))^(a/2) (1_{R\S}/mu(R) + 1_S/mu(S))
    prof = np.where(S_mask, 1 / mu_s, 1 / mu_r)[psi.support]
    pw = np.abs(psi.values)[:, None] * abs(tilde) * np.abs(phi.values)[None, :]
    pointwise = float((pw / (ratio_side * prof[:, None])).max()) if len(pw) else 0.0
    return {
        "coeff": coeff,
        "correction": global_corr * avg_q,
        "tilde": tilde,
        "tilde_split": split,
        "split_rel_err": abs(split - tilde) / max(abs(tilde), abs(coeff), 1e-300),
        "ratio": abs(tilde) / bound if bound > 0 else 0.0,
        "pointwise_ratio": pointwise,
        "q_straddles": bool(not S_mask[q_atoms].all()),
    }


def close_split(T: DiscreteOperator, Q: Cube, R: Cube, b1, b2, eta: float) -> dict:
    """Five-term split of <1_R b2, T(b1 1_Q)> for close cubes of comparable size.

    Delta = Q n R; Q_sep, Q_bdry split Q \\ Delta by the boundary region of R,
    and R_sep, R_bdry split R \\ Delta by the boundary region of Q. Returns the
    five terms in order (R_sep, R_bdry, Delta, Q_bdry, Q_sep), their sum, the
    direct value, T_Delta and the separated-term ratios against
    mu(A) mu(B) / dist(A, B)^d (dist between atom sets).
    """
    m = T.measure
    pts = m.points
    bv1, bv2 = _bvals(b1), _bvals(b2)
    in_q = Q.contains_points(pts)
    in_r = R.contains_points(pts)
    dq = Q.dilate_contains(pts, 1 + 2 * eta) & ~Q.dilate_contains(pts, 1 - 2 * eta)
    dr = R.dilate_contains(pts, 1 + 2 * eta) & ~R.dilate_contains(pts, 1 - 2 * eta)
    delta = in_q & in_r
    q_sep = in_q & ~delta & ~dr
    q_bd = in_q & ~delta & dr
    r_sep = in_r & ~delta & ~dq
    r_bd = in_r & ~delta & dq

    def form(xmask, ymask):
        return bilinear_form(T, bv2, bv1, np.nonzero(xmask)[0], np.nonzero(ymask)[0])

    terms = [form(r_sep, in_q), form(r_bd, in_q), form(delta, delta), form(delta, q_bd), form(delta, q_sep)]
    direct = form(in_r, in_q)
    w = m.weights
    mu_delta = w[delta].sum()

    def sep_ratio(term, a_mask, b_mask):
        if not a_mask.any() or not b_mask.any():
            return 0.0
        from scipy.spatial.distance import cdist

        dmin = cdist(pts[a_mask], pts[b_mask]).min()
        return abs(term) * dmin ** T.kernel.d / (w[a_mask].sum() * w[b_mask].sum())

    total = sum(terms)
    return {
        "terms": terms,
        "sum": total,
        "direct": direct,
        "rel_err": abs(total - direct) / max(abs(direct), 1e-300) if direct != 0 else abs(total),
        "t_delta": terms[2] / mu_delta if mu_delta > 0 else 0j,
        "sep_ratio_r": sep_ratio(terms[0], r_sep, in_q),
        "sep_ratio_q": sep_ratio(terms[4], delta, q_sep),
        "masses": {"delta": float(mu_delta), "q_sep": float(w[q_sep].sum()), "q_bdry": float(w[q_bd].sum()),
                   "r_sep": float(w[r_sep].sum()), "r_bdry": float(w[r_bd].sum())},
    }


def random_rectangles(m: AtomicMeasure, count: int, rng=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Axis-parallel boxes [lo, hi) with corners drawn inside the atom bounding box."""
    rng = np.random.default_rng(rng)
    lo0, hi0 = m.points.min(axis=0), m.points.max(axis=0)
    span = np.where(hi0 > lo0, hi0 - lo0, 1.0)
    out = []
    for _ in range(count):
        a = lo0 + rng.uniform(-0.05, 1.05, m.dim_n) * span
        b = lo0 + rng.uniform(-0.05, 1.05, m.dim_n) * span
        out.append((np.minimum(a, b), np.maximum(a, b)))
    return out


def weak_boundedness_check(T: DiscreteOperator, b1, b2, rectangles) -> float:
    """sup over rectangles of |<1_R b2, T(b1 1_R)>| / mu(R); zero-mass ones skipped."""
    m = T.measure
    bv1, bv2 = _bvals(b1), _bvals(b2)
    best = 0.0
    for lo, hi in rectangles:
        mask = np.all((m.points >= lo) & (m.points < hi), axis=1)
        mass = m.weights[mask].sum()
        if mass == 0:
            continue
        idx = np.nonzero(mask)[0]
        best = max(best, abs(bilinear_form(T, bv2, bv1, idx, idx)) / mass)
    return best
