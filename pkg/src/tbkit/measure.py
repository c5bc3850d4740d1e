"""Atomic measures on R^N with growth diagnostics and test-measure builders."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree


class AccretivityViolation(ValueError):
    """Raised when a cube average of b is too close to zero."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite weighted point set in R^N standing in for a measure of growth d.

    ``r_min`` is the discretization scale below which the growth bound is
    not expected to hold. ``growth_constant`` is the declared C in
    mu(B(x, r)) <= C r^d for r >= r_min (None when nothing is declared).
    """

    points: np.ndarray
    weights: np.ndarray
    growth_d: float
    r_min: float
    growth_constant: Optional[float] = None
    name: str = "custom"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.shape[0] or pts.shape[0] == 0:
            raise ValueError("points and weights must be nonempty and of equal length")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and strictly positive")
        if not (0 < self.growth_d <= pts.shape[1]):
            raise ValueError(f"growth_d must lie in (0, N]; got {self.growth_d}")
        if not self.r_min > 0:
            raise ValueError("r_min must be positive")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("points must be pairwise distinct")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim_n(self) -> int:
        return self.points.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def min_separation(self) -> float:
        """Smallest Euclidean distance between two distinct atoms (inf for one atom)."""
        if self.n_atoms < 2:
            return math.inf
        dist, _ = cKDTree(self.points).query(self.points, k=2)
        return float(dist[:, 1].min())

    def diameter(self) -> float:
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class GrowthReport:
    worst_ratio: float
    r_min: float
    samples: int
    worst_center: int
    worst_radius: float
    bound: float
    passed: bool


@dataclass(frozen=True)
class AccretiveFn:
    """Bounded function b stored with ||b||_inf <= 1.

    ``scale`` is the factor the raw values were divided by, ``delta`` the
    declared (or empirically measured) lower accretivity bound.
    """

    values: np.ndarray
    delta: float
    sup_norm: float
    scale: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex).ravel()
        if self.sup_norm > 1 + 1e-12:
            raise ValueError("AccretiveFn must be normalized to sup norm <= 1")
        if not (0 < self.delta <= 1 + 1e-12):
            raise ValueError(f"delta must lie in (0, 1]; got {self.delta}")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_values(cls, values, delta: Optional[float] = None, name: str = "custom"):
        """Normalize raw values to sup norm 1 and record the factor.

        Without an explicit ``delta`` the pointwise bound min |b| is used, which
        is a valid accretivity constant only when b has a fixed-sign real part;
        use :func:`accretivity_check` for the cube-based value.
        """
        v = np.asarray(values, dtype=complex).ravel()
        scale = float(np.abs(v).max())
        if scale == 0:
            raise AccretivityViolation("b vanishes identically")
        v = v / scale
        if delta is None:
            delta = float(np.abs(v).min()) or 1e-12
        return cls(values=v, delta=min(float(delta), 1.0), sup_norm=float(np.abs(v).max()),
                   scale=scale, name=name)

    @classmethod
    def one(cls, n: int):
        return cls(values=np.ones(n, dtype=complex), delta=1.0, sup_norm=1.0, name="one")


def _region_mask(m: AtomicMeasure, region) -> np.ndarray:
    if region is None:
        return np.ones(m.n_atoms, dtype=bool)
    if callable(region):
        return np.asarray(region(m.points), dtype=bool).ravel()
    region = np.asarray(region)
    if region.dtype == bool:
        return region
    mask = np.zeros(m.n_atoms, dtype=bool)
    mask[region] = True
    return mask


def integrate(m: AtomicMeasure, f, region=None):
    """Sum of f * weight over atoms in ``region``.

    ``region`` may be None (everything), a boolean mask, an index array, or a
    predicate mapping the (n, N) point array to a boolean mask. Vector-valued
    f of shape (n, m) integrates componentwise.
    """
    f = np.asarray(f)
    if f.ndim == 0:
        f = np.full(m.n_atoms, f)
    mask = _region_mask(m, region)
    w = m.weights[mask]
    vals = f[mask]
    if vals.ndim == 1:
        return complex(np.dot(w, vals)) if np.iscomplexobj(vals) else float(np.dot(w, vals))
    return w @ vals


def growth_check(m: AtomicMeasure, d: Optional[float] = None, n_samples: Optional[int] = None,
                 r_min: Optional[float] = None, rng=None, tol: float = 1e-9,
                 chunk: int = 512) -> GrowthReport:
    """Worst ratio mu(B(x,r)) / r^d over closed balls centred at atoms, r >= r_min.

    For a fixed centre the ratio only increases at radii equal to an atom
    distance (or at r_min), so the sup over r is evaluated exactly. Centres
    are all atoms, or ``n_samples`` of them drawn from ``rng``.
    """
    d = m.growth_d if d is None else float(d)
    r_min = m.r_min if r_min is None else float(r_min)
    if not r_min > 0:
        raise ValueError("r_min must be positive; atomic measures violate growth as r -> 0")
    n = m.n_atoms
    if n_samples is None or n_samples >= n:
        centers = np.arange(n)
    else:
        rng = np.random.default_rng(rng)
        centers = np.sort(rng.choice(n, size=n_samples, replace=False))
    worst, worst_c, worst_r = 0.0, int(centers[0]), r_min
    for start in range(0, len(centers), chunk):
        idx = centers[start:start + chunk]
        diff = m.points[idx][:, None, :] - m.points[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        order = np.argsort(dist, axis=1, kind="stable")
        ds = np.take_along_axis(dist, order, axis=1)
        cum = np.cumsum(m.weights[order], axis=1)
        radii = np.maximum(ds, r_min)
        ratio = cum / radii ** d
        flat = int(np.argmax(ratio))
        i, j = divmod(flat, n)
        if ratio[i, j] > worst:
            worst, worst_c, worst_r = float(ratio[i, j]), int(idx[i]), float(radii[i, j])
    bound = 1.0 if m.growth_constant is None else float(m.growth_constant)
    return GrowthReport(worst_ratio=worst, r_min=r_min, samples=len(centers), worst_center=worst_c,
                        worst_radius=worst_r, bound=bound, passed=bool(worst <= bound * (1 + tol)))


def accretivity_check(m: AtomicMeasure, b, cubes: Iterable) -> float:
    """Empirical delta: min over cubes of |int_Q b| / mu(Q).

    Cubes are given as atom masks or index arrays; zero-mass cubes are skipped.
    Returns inf when every cube is empty.
    """
    vals = b.values if isinstance(b, AccretiveFn) else np.asarray(b, dtype=complex)
    best = math.inf
    for cube in cubes:
        mask = _region_mask(m, cube)
        mass = m.weights[mask].sum()
        if mass <= 0:
            continue
        best = min(best, abs(np.dot(m.weights[mask], vals[mask])) / mass)
    return best


# ---------------------------------------------------------------- builders

def lebesgue_grid(dim_n: int = 1, per_axis: int = 256) -> AtomicMeasure:
    """Uniform grid of cell centres in [0,1)^N, each of weight per_axis^-N."""
    h = 1.0 / per_axis
    axes = [(np.arange(per_axis) + 0.5) * h] * dim_n
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim_n)
    w = np.full(len(pts), h ** dim_n)
    # a closed ball of radius r >= h holds at most (2r/h + 1)^N <= (3r/h)^N atoms
    return AtomicMeasure(pts, w, growth_d=float(dim_n), r_min=h, growth_constant=3.0 ** dim_n,
                         name="lebesgue_grid")


def cantor(ratio: float = 0.25, depth: int = 5, dim_n: int = 1) -> AtomicMeasure:
    """Corner Cantor measure in [0,1)^N: each cube keeps its 2^N corner subcubes.

    Atoms sit at the centres of the depth-level cubes with equal weights, so
    the total mass is 1 and d = N log 2 / log(1/ratio).
    """
    if not (0 < ratio < 0.5):
        raise ValueError(f"Cantor contraction ratio must lie in (0, 1/2); got {ratio}")
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    corners = np.zeros((1, dim_n))
    side = 1.0
    offsets = np.array(np.meshgrid(*[[0.0, 1.0]] * dim_n, indexing="ij")).reshape(dim_n, -1).T
    for _ in range(depth):
        new_side = side * ratio
        shift = offsets * (side - new_side)
        corners = (corners[:, None, :] + shift[None, :, :]).reshape(-1, dim_n)
        side = new_side
    pts = corners + side / 2
    w = np.full(len(pts), 2.0 ** (-dim_n * depth))
    d = dim_n * math.log(2) / math.log(1 / ratio)
    # a ball of diameter below the sibling gap meets one cube of each finer generation
    const = (2.0 / (1 - 2 * ratio)) ** d
    return AtomicMeasure(pts, w, growth_d=d, r_min=side, growth_constant=const, name="cantor")


_GRAPH_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "abs": np.abs,
}


def graph_arclength(function="abs", samples: int = 256, lo: float = -1.0, hi: float = 1.0,
                    lipschitz: float = 1.0) -> AtomicMeasure:
    """Arclength measure on the graph of a Lipschitz function over [lo, hi] in R^2.

    The interval is cut into ``samples`` equal pieces; each atom sits on the
    graph above the piece's midpoint and carries the chord length of the piece.
    """
    fn = _GRAPH_FUNCTIONS[function] if isinstance(function, str) else function
    edges = np.linspace(lo, hi, samples + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    ends = np.stack([edges, fn(edges)], axis=1)
    w = np.linalg.norm(np.diff(ends, axis=0), axis=1)
    pts = np.stack([mids, fn(mids)], axis=1)
    h = (hi - lo) / samples
    # atoms in an x-window of width 2r + h, each of mass <= sqrt(1+L^2) h
    const = 3.0 * math.sqrt(1 + lipschitz ** 2)
    return AtomicMeasure(pts, w, growth_d=1.0, r_min=h, growth_constant=const, name="graph_arclength")


def custom(points, weights, growth_d: float, r_min: Optional[float] = None,
           growth_constant: Optional[float] = None) -> AtomicMeasure:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if r_min is None:
        r_min = cKDTree(pts).query(pts, k=2)[0][:, 1].min() if len(pts) > 1 else 1.0
    return AtomicMeasure(pts, weights, growth_d=growth_d, r_min=float(r_min),
                         growth_constant=growth_constant, name="custom")


_BUILDERS = {
    "lebesgue_grid": lebesgue_grid,
    "cantor": cantor,
    "graph_arclength": graph_arclength,
    "custom": custom,
}


def build_measure(kind: str, **params) -> AtomicMeasure:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown measure kind {kind!r}; expected one of {sorted(_BUILDERS)}")
    return _BUILDERS[kind](**params)


def measure_from_json(spec) -> AtomicMeasure:
    """Build from a dict, a JSON string, or a path to a JSON file."""
    if isinstance(spec, (str, Path)):
        text = Path(spec).read_text() if Path(str(spec)).exists() else str(spec)
        spec = json.loads(text)
    spec = dict(spec)
    return build_measure(spec.pop("kind"), **spec)


def measure_to_csv(m: AtomicMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(m.dim_n)] + ["weight"])
        for p, w in zip(m.points, m.weights):
            writer.writerow([repr(float(c)) for c in p] + [repr(float(w))])


# ------------------------------------------------------ accretive builders

def build_accretive(kind: str, m: AtomicMeasure, rng=None, **params) -> AccretiveFn:
    """Test functions b on the atoms of ``m``.

    one          b = 1
    plane_wave   b = exp(i <omega, x>), ``omega`` a scalar or N-vector
    random_phase b = exp(i t U) with U uniform on [-1, 1]; Re b >= cos t
    """
    if kind == "one":
        return AccretiveFn.one(m.n_atoms)
    if kind == "plane_wave":
        omega = np.broadcast_to(np.asarray(params.get("omega", math.pi / 4), dtype=float), (m.dim_n,))
        vals = np.exp(1j * (m.points @ omega))
        # the phase spread over the support is at most |omega| diam
        spread = float(np.linalg.norm(omega)) * m.diameter() / 2
        delta = params.get("delta", math.cos(spread) if spread < math.pi / 2 else None)
        return AccretiveFn.from_values(vals, delta=delta, name="plane_wave")
    if kind == "random_phase":
        t = float(params.get("t", 1.0))
        if not 0 <= t < math.pi / 2:
            raise ValueError("random_phase needs 0 <= t < pi/2")
        rng = np.random.default_rng(rng)
        vals = np.exp(1j * t * rng.uniform(-1, 1, size=m.n_atoms))
        return AccretiveFn.from_values(vals, delta=math.cos(t), name="random_phase")
    raise ValueError(f"unknown accretive kind {kind!r}")
