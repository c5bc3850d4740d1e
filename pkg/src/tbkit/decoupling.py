"""Tangent martingale decoupling checks and Rademacher-bound estimates."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .carleson import EXACT_LEVELS, _sign_moments, sign_patterns
from .dyadic import Filtration, abstract_filtration
from .haar import _as_2d, pointwise_norm


class MeasurabilityViolation(ValueError):
    """f_A for A in level k is not constant on the blocks of level k - 1."""


class KernelBoundViolation(ValueError):
    """An averaging kernel exceeds 1 in modulus."""


@dataclass(frozen=True, eq=False)
class PartitionSystem:
    """Nested partitions with one function per set, stored level by level.

    ``filt`` lists the partitions finest first. ``terms[k]`` has shape (n, m)
    and equals sum over A in level k of f_A; each f_A lives on A, so the sum
    determines every f_A. Level 0 is measured against the atom partition.
    """

    filt: Filtration
    terms: tuple

    def __post_init__(self):
        if len(self.terms) != len(self.filt.levels):
            raise ValueError("one term per partition level is required")
        terms = tuple(_as_2d(np.asarray(t, dtype=complex))[0] for t in self.terms)
        object.__setattr__(self, "terms", terms)
        self.check_measurable()

    @property
    def n_levels(self) -> int:
        return len(self.terms)

    @property
    def weights(self) -> np.ndarray:
        return self.filt.weights

    def check_measurable(self, tol: float = 1e-12) -> None:
        for k in range(1, self.n_levels):
            t = self.terms[k]
            mean = self.filt.cond_mean(k - 1, t)
            if np.abs(mean - t).max(initial=0.0) > tol * max(1.0, float(np.abs(t).max(initial=0.0))):
                raise MeasurabilityViolation(f"term at level {k} is not constant on level {k - 1} blocks")

    def to_dict(self) -> dict:
        return {"labels": self.filt.labels.tolist(), "weights": self.filt.weights.tolist(),
                "terms_re": [t.real.tolist() for t in self.terms],
                "terms_im": [t.imag.tolist() for t in self.terms]}


def partition_system_from_json(spec) -> PartitionSystem:
    if isinstance(spec, (str, Path)):
        text = Path(spec).read_text() if Path(str(spec)).exists() else str(spec)
        spec = json.loads(text)
    filt = abstract_filtration(spec["labels"], spec["weights"])
    re = spec["terms_re"]
    im = spec.get("terms_im", [np.zeros_like(np.asarray(t)).tolist() for t in re])
    return PartitionSystem(filt, tuple(np.asarray(a) + 1j * np.asarray(b) for a, b in zip(re, im)))


def random_cut_filtration(n_atoms: int, n_levels: int, rng=None, weights=None, span: float = 8.0) -> Filtration:
    """Nested interval partitions of atoms 0..n-1 from random cut heights.

    Each of the n-1 gaps gets a height with P(height >= k) = 2^(-span k / L);
    a gap cuts level k when its height is at least k. Level 0 keeps every gap.
    """
    rng = np.random.default_rng(rng)
    u = rng.random(n_atoms - 1)
    heights = np.floor(-np.log2(np.maximum(u, 1e-300)) * n_levels / span).astype(int)
    labels = []
    for k in range(n_levels):
        cuts = heights >= k
        labels.append(np.concatenate([[0], np.cumsum(cuts)]))
    if weights is None:
        weights = rng.dirichlet(np.full(n_atoms, 2.0))
    return abstract_filtration(labels, weights)


def random_partition_system(filt: Filtration, m: int = 4, rng=None, constant: bool = False) -> PartitionSystem:
    """Gaussian f_A constant on the next finer blocks (or on A itself with ``constant``)."""
    rng = np.random.default_rng(rng)
    terms = []
    for k in range(len(filt.levels)):
        base = k if constant else k - 1
        if base < 0:
            v = rng.normal(size=(filt.n_atoms, m)) + 1j * rng.normal(size=(filt.n_atoms, m))
        else:
            nb = filt.n_blocks(base)
            v = (rng.normal(size=(nb, m)) + 1j * rng.normal(size=(nb, m)))[filt.labels[base]]
        terms.append(v * 2.0 ** (-0.25 * k))
    return PartitionSystem(filt, tuple(terms))


def _randomized_norm_p(terms: Sequence[np.ndarray], w: np.ndarray, p: float, q: float,
                       sign_trials: Optional[int], rng) -> float:
    """E_eps int || sum_k eps_k terms_k ||^p dmu (exact over signs for <= 12 levels)."""
    if sign_trials is None and len(terms) <= EXACT_LEVELS:
        mom = _sign_moments(list(terms), (p,), None, q)[0, -1]
        return float(np.dot(w, mom))
    signs = sign_patterns(len(terms), sign_trials or 512, rng)
    n, m = terms[0].shape
    sums = (signs @ np.stack(terms).reshape(len(terms), -1)).reshape(-1, n, m)
    return float(np.dot(w, (pointwise_norm(sums, q) ** p).mean(axis=0)))


def sample_tangent_points(filt: Filtration, rng) -> list[np.ndarray]:
    """One draw y_A from nu_A for every set A of every level; returned as per-atom indices."""
    w = filt.weights
    out = []
    for k in range(len(filt.levels)):
        lab = filt.labels[k]
        nb = filt.n_blocks(k)
        order = np.argsort(lab, kind="stable")
        mass = np.bincount(lab, w, nb)
        starts = np.concatenate([[0], np.cumsum(np.bincount(lab, minlength=nb))])
        cum = np.cumsum(w[order])
        before = np.concatenate([[0.0], cum])[starts[:-1]]
        # inverse transform inside each block, clipped to the block range
        target = before + rng.random(nb) * mass
        pos = np.searchsorted(cum, target, side="right")
        pos = np.clip(pos, starts[:-1], starts[1:] - 1)
        out.append(order[pos][lab])
    return out


def tangent_equivalence(sys: PartitionSystem, p: float = 2.0, q: float = 2.0, trials: int = 64,
                        rng=None, sign_trials: Optional[int] = None) -> dict:
    """Both sides of the tangent decoupling equivalence in L^p.

    lhs = (E int || sum_k eps_k sum_A f_A(x) ||^p)^(1/p); rhs replaces f_A(x)
    by 1_A(x) f_A(y_A) with y_A ~ nu_A, averaged over ``trials`` draws of y.
    For p = q = 2 both sides are computed exactly by orthogonality as well.
    """
    rng = np.random.default_rng(rng)
    w = sys.weights
    lhs_p = _randomized_norm_p(sys.terms, w, p, q, sign_trials, rng)
    draws = []
    for _ in range(trials):
        ys = sample_tangent_points(sys.filt, rng)
        dec = [t[y] for t, y in zip(sys.terms, ys)]
        draws.append(_randomized_norm_p(dec, w, p, q, sign_trials, rng))
    draws = np.array(draws)
    rhs_p = float(draws.mean())
    lhs, rhs = lhs_p ** (1 / p), rhs_p ** (1 / p)
    # delta method for the standard error of rhs
    se = float(draws.std(ddof=1) / math.sqrt(trials)) / (p * rhs_p ** (1 - 1 / p)) if trials > 1 else 0.0
    out = {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else 1.0, "stderr": se,
           "ratio_stderr": lhs * se / rhs ** 2 if rhs > 0 else 0.0, "trials": trials}
    if p == 2 and q == 2:
        exact = sum(float(np.dot(w, (np.abs(t) ** 2).sum(axis=1))) for t in sys.terms)
        out["exact_p2"] = math.sqrt(exact)
    return out


def tangent_exact_small(sys: PartitionSystem, p: float, q: float = 2.0) -> tuple[float, float]:
    """Both sides by enumerating every sign pattern and every choice of (y_A).

    Only feasible for a handful of atoms; used as an independent check.
    """
    filt = sys.filt
    w = filt.weights
    n = filt.n_atoms
    L = sys.n_levels
    sets = [(k, b) for k in range(L) for b in range(filt.n_blocks(k))]
    members = {(k, b): np.nonzero(filt.labels[k] == b)[0] for k, b in sets}
    signs = list(itertools.product((1.0, -1.0), repeat=L))
    lhs = 0.0
    for eps in signs:
        tot = sum(e * t for e, t in zip(eps, sys.terms))
        lhs += float(np.dot(w, pointwise_norm(tot, q) ** p))
    lhs /= len(signs)
    rhs = 0.0
    for choice in itertools.product(*[members[s] for s in sets]):
        prob = 1.0
        ys = [np.zeros(n, dtype=np.int64) for _ in range(L)]
        for (k, b), y in zip(sets, choice):
            mask = filt.labels[k] == b
            prob *= w[y] / w[mask].sum()
            ys[k][mask] = y
        dec = [t[y] for t, y in zip(sys.terms, ys)]
        val = 0.0
        for eps in signs:
            tot = sum(e * d for e, d in zip(eps, dec))
            val += float(np.dot(w, pointwise_norm(tot, q) ** p))
        rhs += prob * val / len(signs)
    return lhs ** (1 / p), rhs ** (1 / p)


def random_sign_kernels(filt: Filtration, rng=None, kind: str = "sign") -> list[np.ndarray]:
    """Per-level kernels k(x, z) on atoms: random signs, all ones or zeros."""
    rng = np.random.default_rng(rng)
    n = filt.n_atoms
    out = []
    for _ in range(len(filt.levels)):
        if kind == "sign":
            out.append(rng.choice((-1.0, 1.0), size=(n, n)))
        elif kind == "one":
            out.append(np.ones((n, n)))
        elif kind == "zero":
            out.append(np.zeros((n, n)))
        else:
            raise ValueError(f"unknown kernel kind {kind!r}")
    return out


def averaged_kernel_bound(sys: PartitionSystem, kernels: Sequence[np.ndarray], p: float = 2.0, q: float = 2.0,
                          rng=None, sign_trials: Optional[int] = None) -> dict:
    """LHS / RHS of the averaged-kernel corollary.

    LHS uses, on each A, x -> mu(A)^-1 int_A k_A(x, z) f_A(z) dmu(z); entries of
    ``kernels[k]`` outside the diagonal blocks of level k are ignored.
    """
    rng = np.random.default_rng(rng)
    w = sys.weights
    filt = sys.filt
    avg_terms = []
    for k, (t, K) in enumerate(zip(sys.terms, kernels)):
        K = np.asarray(K)
        if np.abs(K).max(initial=0.0) > 1 + 1e-12:
            raise KernelBoundViolation(f"kernel at level {k} exceeds 1 in modulus")
        lab = filt.labels[k]
        same = lab[:, None] == lab[None, :]
        mass = np.bincount(lab, w, filt.n_blocks(k))[lab]
        avg_terms.append(((K * same) @ (w[:, None] * t)) / mass[:, None])
    lhs = _randomized_norm_p(avg_terms, w, p, q, sign_trials, rng) ** (1 / p)
    rhs = _randomized_norm_p(sys.terms, w, p, q, sign_trials, rng) ** (1 / p)
    return {"lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else 0.0}


# ------------------------------------------------------------- R-bounds


def _rad_l2(vectors: np.ndarray, q: float) -> float:
    """|| sum_k eps_k v_k ||_{L^2(Omega; l_q)} by exact enumeration (rows = k)."""
    n = vectors.shape[0]
    if q == 2:
        return float(math.sqrt((np.abs(vectors) ** 2).sum()))
    signs = sign_patterns(n, None if n <= EXACT_LEVELS else 4096, 0)
    sums = signs @ vectors
    return float(math.sqrt((pointwise_norm(sums, q) ** 2).mean()))


def rbound_estimate(family: Sequence[np.ndarray], n_vectors: int = 2, trials: int = 200, rng=None,
                    q: float = 2.0, grid: Optional[np.ndarray] = None, max_assignments: int = 4096) -> dict:
    """Lower estimate of the R-bound of a finite operator family on l_q^dim.

    Vector tuples are drawn first (or taken from every n-tuple of ``grid``
    rows), and for each tuple every assignment of family members is tried
    when there are at most ``max_assignments`` of them; otherwise
    assignments are sampled. Drawing the vectors before looking at the family
    makes the estimate monotone under enlarging the family.
    """
    rng = np.random.default_rng(rng)
    fam = [np.asarray(T, dtype=complex) for T in family]
    if not fam:
        raise ValueError("family must be nonempty")
    dim = fam[0].shape[0]
    if grid is not None:
        grid = np.asarray(grid, dtype=complex)
        tuples = (np.array(t) for t in itertools.product(grid, repeat=n_vectors))
    else:
        vecs = rng.normal(size=(trials, n_vectors, dim)) + 1j * rng.normal(size=(trials, n_vectors, dim))
        tuples = iter(vecs)
    n_assign = len(fam) ** n_vectors
    if n_assign <= max_assignments:
        assignments = list(itertools.product(range(len(fam)), repeat=n_vectors))
    else:
        assignments = [tuple(rng.integers(0, len(fam), n_vectors)) for _ in range(max_assignments)]
    best, arg = 0.0, None
    stack = np.stack(fam)
    for xi in tuples:
        den = _rad_l2(xi, q)
        if den == 0:
            continue
        for a in assignments:
            img = np.einsum("kij,kj->ki", stack[list(a)], xi)
            val = _rad_l2(img, q) / den
            if val > best:
                best, arg = val, a
    return {"estimate": best, "assignment": arg, "assignments_tried": len(assignments)}


def unit_grid(dim: int = 2, steps: int = 8) -> np.ndarray:
    """Real unit vectors on a grid of angles in the first two coordinates plus the basis."""
    ang = np.arange(steps) * math.pi / steps
    pts = np.zeros((steps, dim))
    pts[:, 0] = np.cos(ang)
    if dim > 1:
        pts[:, 1] = np.sin(ang)
    return np.unique(np.round(np.vstack([pts, np.eye(dim)]), 15), axis=0)


def tangent_level_sweep(level_counts=(2, 4, 8, 16), p: float = 2.0, q: float = 2.0, instances: int = 4,
                        atoms: int = 256, m: int = 4, trials: int = 32, sign_trials: int = 1024,
                        seed: int = 0) -> dict:
    """Two-sided constant C(L) = max over instances of max(ratio, 1/ratio) per level count.

    Instance i at every level count uses the seeds seed + 100 + i (filtration)
    and seed + 200 + i (values), so the chain differs only in L. Signs are
    enumerated exactly up to 12 levels and sampled beyond.
    """
    rows, consts = [], []
    for L in level_counts:
        ratios = []
        for i in range(instances):
            filt = random_cut_filtration(atoms, L, rng=seed + 100 + i)
            sysd = random_partition_system(filt, m=m, rng=seed + 200 + i)
            res = tangent_equivalence(sysd, p, q, trials, rng=seed + i,
                                      sign_trials=None if L <= EXACT_LEVELS else sign_trials)
            ratios.append(res["ratio"])
            rows.append({"levels": L, "instance": i, **{k: res[k] for k in ("lhs", "rhs", "ratio", "stderr")}})
        consts.append(max(max(x, 1 / x) for x in ratios))
    growth = [b / a for a, b in zip(consts, consts[1:])]
    return {"levels": list(level_counts), "C": consts, "growth": growth, "rows": rows}
