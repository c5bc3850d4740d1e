"""Shifted dyadic systems, cube geometry and good/bad classification.

A system is determined by a binary shift sequence beta_j in {0,1}^N. Its level-k
cubes are x_k + 2^k (n + [0,1)^N) with x_k = sum_{j<k} beta_j 2^j, where the
sum runs over a finite window [k_lo, k_hi] and bits outside it are zero.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

# ------------------------------------------------------------------ shifts


@dataclass(frozen=True, eq=False)
class ShiftSequence:
    k_lo: int
    k_hi: int
    bits: np.ndarray  # (k_hi - k_lo + 1, N) in {0, 1}

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.int64)
        if b.ndim == 1:
            b = b[:, None]
        if self.k_hi < self.k_lo:
            raise ValueError("shift window must be nonempty")
        if b.shape[0] != self.k_hi - self.k_lo + 1:
            raise ValueError("one bit vector per level of the window is required")
        if not np.isin(b, (0, 1)).all():
            raise ValueError("shift bits must be 0 or 1")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def dim_n(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def zero(cls, dim_n: int, k_lo: int, k_hi: int) -> "ShiftSequence":
        return cls(k_lo, k_hi, np.zeros((k_hi - k_lo + 1, dim_n), dtype=np.int64))

    @classmethod
    def random(cls, dim_n: int, k_lo: int, k_hi: int, rng=None) -> "ShiftSequence":
        rng = np.random.default_rng(rng)
        return cls(k_lo, k_hi, rng.integers(0, 2, size=(k_hi - k_lo + 1, dim_n)))

    @classmethod
    def from_bits(cls, dim_n: int, k_lo: int, k_hi: int, bits: dict) -> "ShiftSequence":
        """Zero sequence with the given {level: bit vector} entries set."""
        arr = np.zeros((k_hi - k_lo + 1, dim_n), dtype=np.int64)
        for k, v in bits.items():
            arr[k - k_lo] = np.broadcast_to(np.asarray(v, dtype=np.int64), (dim_n,))
        return cls(k_lo, k_hi, arr)

    def bit(self, k: int) -> np.ndarray:
        if self.k_lo <= k <= self.k_hi:
            return self.bits[k - self.k_lo]
        return np.zeros(self.dim_n, dtype=np.int64)

    def offset(self, k: int) -> np.ndarray:
        """x_k = sum over window levels j < k of beta_j 2^j; lies in [0, 2^k)^N."""
        hi = min(k, self.k_hi + 1)
        if hi <= self.k_lo:
            return np.zeros(self.dim_n)
        j = np.arange(self.k_lo, hi)
        return (self.bits[: hi - self.k_lo] * np.exp2(j)[:, None]).sum(axis=0)

    def offsets(self, levels: Sequence[int]) -> np.ndarray:
        return np.array([self.offset(int(k)) for k in levels]).reshape(len(levels), self.dim_n)

    @staticmethod
    def hybrid(small: "ShiftSequence", large: "ShiftSequence", split: int) -> "ShiftSequence":
        """Bits of ``small`` below level ``split`` and of ``large`` from ``split`` up."""
        k_lo, k_hi = min(small.k_lo, large.k_lo), max(small.k_hi, large.k_hi)
        bits = np.array([small.bit(k) if k < split else large.bit(k) for k in range(k_lo, k_hi + 1)])
        return ShiftSequence(k_lo, k_hi, bits)

    def to_dict(self) -> dict:
        return {"k_lo": self.k_lo, "k_hi": self.k_hi, "bits": self.bits.tolist()}


# ----------------------------------------------------------------- systems


@dataclass(frozen=True, eq=False)
class DyadicSystem:
    shift: ShiftSequence
    name: str = "D"

    @property
    def dim_n(self) -> int:
        return self.shift.dim_n

    @property
    def window(self) -> tuple[int, int]:
        return self.shift.k_lo, self.shift.k_hi

    def _check_level(self, k: int):
        if not (self.shift.k_lo <= k <= self.shift.k_hi + 1):
            raise ValueError(f"level {k} outside shift window [{self.shift.k_lo}, {self.shift.k_hi + 1}]")

    def offset(self, k: int) -> np.ndarray:
        return self.shift.offset(k)

    def cube(self, k: int, coords) -> "Cube":
        return Cube(self, int(k), tuple(int(c) for c in np.ravel(coords)))

    def coords_of_points(self, points, k: int) -> np.ndarray:
        self._check_level(k)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((pts - self.offset(k)) / 2.0 ** k).astype(np.int64)

    def cube_of_point(self, x, k: int) -> "Cube":
        return self.cube(k, self.coords_of_points(np.reshape(x, (1, -1)), k)[0])

    def parent_coords(self, coords: np.ndarray, k: int) -> np.ndarray:
        """Coordinates at level k+1 of the parents of level-k cubes."""
        return np.floor_divide(np.asarray(coords) - self.shift.bit(k), 2)

    def child_position(self, coords: np.ndarray, k: int) -> np.ndarray:
        """Position e in {0,1}^N of level-k cubes inside their parents."""
        return np.asarray(coords) - self.shift.bit(k) - 2 * self.parent_coords(coords, k)

    def children(self, Q: "Cube") -> list["Cube"]:
        base = 2 * np.asarray(Q.coords) + self.shift.bit(Q.level - 1)
        return [self.cube(Q.level - 1, base + np.array(e))
                for e in itertools.product((0, 1), repeat=self.dim_n)]

    def ancestor(self, Q: "Cube", j: int) -> "Cube":
        c = np.asarray(Q.coords)
        for k in range(Q.level, Q.level + j):
            c = self.parent_coords(c, k)
        return self.cube(Q.level + j, c)


@dataclass(frozen=True)
class Cube:
    system: DyadicSystem = field(compare=True, repr=False)
    level: int
    coords: tuple

    @property
    def side(self) -> float:
        return 2.0 ** self.level

    @property
    def lo(self) -> np.ndarray:
        return self.system.offset(self.level) + self.side * np.asarray(self.coords, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.side

    @property
    def center(self) -> np.ndarray:
        return self.lo + self.side / 2

    def contains_points(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lo) & (pts < self.hi), axis=1)

    def contains_cube(self, other: "Cube") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def dilate_contains(self, points, lam: float) -> np.ndarray:
        """Membership in the half-open dilate lam*Q about the centre."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        half = lam * self.side / 2
        c = self.center
        return np.all((pts >= c - half) & (pts < c + half), axis=1)

    def key(self) -> tuple:
        return (self.system.name, self.level) + self.coords


# ---------------------------------------------------------------- geometry


def _box_gaps(lo1, hi1, lo2, hi2) -> np.ndarray:
    return np.maximum(0.0, np.maximum(lo2 - hi1, lo1 - hi2))


def box_distance(lo1, hi1, lo2, hi2, metric: str = "l2") -> float:
    g = _box_gaps(np.asarray(lo1), np.asarray(hi1), np.asarray(lo2), np.asarray(hi2))
    return float(np.linalg.norm(g) if metric == "l2" else g.max(initial=0.0))


def box_boundary_distance(lo1, hi1, lo2, hi2, metric: str = "l2") -> float:
    """Distance from the closed box 1 to the boundary of box 2."""
    lo1, hi1, lo2, hi2 = map(np.asarray, (lo1, hi1, lo2, hi2))
    gaps = _box_gaps(lo1, hi1, lo2, hi2)
    if gaps.max(initial=0.0) > 0:
        return float(np.linalg.norm(gaps) if metric == "l2" else gaps.max())
    if np.all(lo1 >= lo2) and np.all(hi1 <= hi2):
        return float(min((lo1 - lo2).min(), (hi2 - hi1).min()))
    return 0.0


def geometry(Q: Cube, R: Cube) -> dict:
    """dist, dist_to_boundary (of R), long_distance, plus l-infinity variants."""
    if Q.system.dim_n != R.system.dim_n:
        raise ValueError("cubes live in different dimensions")
    args = (Q.lo, Q.hi, R.lo, R.hi)
    dist = box_distance(*args)
    return {
        "dist": dist,
        "dist_linf": box_distance(*args, metric="linf"),
        "dist_to_boundary": box_boundary_distance(*args),
        "dist_to_boundary_linf": box_boundary_distance(*args, metric="linf"),
        "long_distance": Q.side + dist + R.side,
    }


# ------------------------------------------------------------ parameters


@dataclass(frozen=True)
class GoodnessParams:
    """Goodness parameters; gamma = alpha / (2 (alpha + d)).

    ``skeleton`` selects whether the boundaries of the half-side children of a
    large cube count towards singularity (True, the default) or only its own
    boundary (False).
    """

    alpha: float = 1.0
    d: float = 1.0
    r: int = 8
    lambda_bmo: float = 1.0
    eta: float = 0.1
    L_max: int = 40
    skeleton: bool = True
    strict: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.d <= 0:
            raise ValueError("alpha and d must be positive")
        if self.r < 1:
            raise ValueError("r must be a positive integer")
        if self.lambda_bmo < 1:
            raise ValueError("lambda_bmo must be >= 1")
        if not (0 < self.eta < 0.25):
            raise ValueError("eta must lie in (0, 1/4)")
        if self.strict and 2 ** (self.r * (1 - self.gamma)) < 4 * self.lambda_bmo:
            raise ValueError(
                f"r={self.r} violates 2^(r(1-gamma)) >= 4*lambda "
                f"(gamma={self.gamma:.4g}, lambda={self.lambda_bmo}); smallest admissible r is "
                f"{min_admissible_r(self.gamma, self.lambda_bmo)}")

    @property
    def gamma(self) -> float:
        return self.alpha / (2 * (self.alpha + self.d))

    def threshold(self, q_level: int, r_level) -> np.ndarray:
        """l(Q)^gamma l(R)^(1-gamma) for the given levels."""
        g = self.gamma
        return np.exp2(g * q_level + (1 - g) * np.asarray(r_level, dtype=float))


def min_admissible_r(gamma: float, lam: float = 1.0) -> int:
    return max(1, math.ceil(math.log2(4 * lam) / (1 - gamma) - 1e-12))


def theta(j: int, p: GoodnessParams) -> int:
    """Smallest integer >= (j gamma + r) / (1 - gamma)."""
    if j < 0:
        raise ValueError("theta is defined for j >= 0")
    g = p.gamma
    val = (j * g + p.r) / (1 - g)
    n = math.ceil(val)
    # guard against float noise just above an integer
    return n - 1 if abs(val - (n - 1)) < 1e-12 else n


def is_singular_pair(Q: Cube, R: Cube, p: GoodnessParams, skeleton: Optional[bool] = None) -> str:
    """'essentially_singular', 'singular' or 'neither'.

    With ``skeleton`` (default from ``p``) the children of R are tested too.
    """
    if Q.level > R.level:
        raise ValueError("is_singular_pair needs l(Q) <= l(R)")
    skeleton = p.skeleton if skeleton is None else skeleton
    thr = float(p.threshold(Q.level, R.level))
    candidates = [R] + (R.system.children(R) if skeleton and R.level > Q.level else [])
    singular = any(box_boundary_distance(Q.lo, Q.hi, S.lo, S.hi) <= thr for S in candidates)
    if not singular:
        return "neither"
    return "essentially_singular" if R.level - Q.level >= p.r else "singular"


# ---------------------------------------------------------------- goodness


def _grid_gap(lo: np.ndarray, side: float, offset: np.ndarray, spacing: float) -> np.ndarray:
    """Distance from closed boxes [lo, lo+side] to the hyperplane grid offset + spacing Z.

    ``lo`` has shape (..., N); the result is the minimum over axes.
    """
    t = np.mod(lo - offset, spacing)
    gap = np.where(t + side >= spacing, 0.0, np.minimum(t, spacing - t - side))
    return gap.min(axis=-1)


def excess_range(q_level: int, hybrid: ShiftSequence, p: GoodnessParams,
                 L_max: Optional[int] = None) -> range:
    """Level excesses L = level(R) - level(Q) searched for essential singularity.

    The largest searchable excess is the one whose grid is set by window bits
    (level(R) <= k_hi + 1). An explicit ``L_max`` beyond that is rejected.
    """
    cap = hybrid.k_hi + 1 - q_level
    if L_max is None:
        top = min(p.L_max, cap)
    else:
        if L_max > cap:
            raise ValueError(f"shift window (k_hi={hybrid.k_hi}) too small for L_max={L_max} at level {q_level}")
        top = L_max
    return range(p.r, top + 1)


def bad_excess(lo: np.ndarray, q_level: int, hybrid: ShiftSequence, p: GoodnessParams,
               L_max: Optional[int] = None) -> np.ndarray:
    """Smallest excess at which each cube is essentially singular, or -1 if good.

    ``lo`` holds lower corners (..., N) of cubes at ``q_level``.
    """
    lo = np.asarray(lo, dtype=float)
    side = 2.0 ** q_level
    out = np.full(lo.shape[:-1], -1, dtype=np.int64)
    for L in excess_range(q_level, hybrid, p, L_max):
        K = q_level + L
        thr = float(p.threshold(q_level, K))
        hit = _grid_gap(lo, side, hybrid.offset(K), 2.0 ** K) <= thr
        if p.skeleton:
            hit |= _grid_gap(lo, side, hybrid.offset(K - 1), 2.0 ** (K - 1)) <= thr
        out = np.where((out < 0) & hit, L, out)
    return out


def is_good(Q: Cube, opposing: ShiftSequence, opposing_tilde: ShiftSequence, p: GoodnessParams,
            L_max: Optional[int] = None) -> bool:
    """Goodness of Q against the hybrid of the opposing sequences.

    The hybrid takes ``opposing_tilde`` bits below level(Q) and ``opposing``
    bits from level(Q) up.
    """
    hyb = ShiftSequence.hybrid(opposing_tilde, opposing, Q.level)
    return bool(bad_excess(Q.lo[None, :], Q.level, hyb, p, L_max)[0] < 0)


def good_mask(system: DyadicSystem, level: int, coords: np.ndarray, opposing: ShiftSequence,
              opposing_tilde: ShiftSequence, p: GoodnessParams) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(-1, system.dim_n)
    lo = system.offset(level) + 2.0 ** level * coords
    hyb = ShiftSequence.hybrid(opposing_tilde, opposing, level)
    return bad_excess(lo, level, hyb, p) < 0


def bad_probability_bound(dim_n: int, gamma: float, r: int) -> float:
    return 2 * dim_n * 2.0 ** (-r * gamma) / (1 - 2.0 ** (-gamma))


def bad_probability_mc(p: GoodnessParams, trials: int, rng=None, dim_n: int = 1,
                       fine_bits: int = 10, chunk: int = 20000) -> dict:
    """Monte Carlo bad rate of the fixed cube [0,1)^N under random opposing shifts.

    The opposing hybrid uses fine_bits random bits below level 0 and random
    bits on levels 0..L_max; all arithmetic stays exact in double precision.
    Reports the frequency, its binomial standard error, the analytic bound and
    the bound on the part of the analytic series beyond the searched excesses.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    k_lo, k_hi = -fine_bits, p.L_max
    bad = 0
    levels = range(p.r, p.L_max + 1)
    for start in range(0, trials, chunk):
        t = min(chunk, trials - start)
        bits = rng.integers(0, 2, size=(t, k_hi - k_lo + 1, dim_n))
        weights = np.exp2(np.arange(k_lo, k_hi + 1))[None, :, None]
        partial = np.cumsum(bits * weights, axis=1)  # partial[:, i] = sum over j <= k_lo + i
        lo = np.zeros((t, dim_n))
        hit = np.zeros(t, dtype=bool)
        for L in levels:
            thr = float(p.threshold(0, L))
            o = partial[:, L - 1 - k_lo]
            hit |= _grid_gap(lo, 1.0, o, 2.0 ** L) <= thr
            if p.skeleton:
                o1 = partial[:, L - 2 - k_lo]
                hit |= _grid_gap(lo, 1.0, o1, 2.0 ** (L - 1)) <= thr
        bad += int(hit.sum())
    freq = bad / trials
    g = p.gamma
    bound = bad_probability_bound(dim_n, g, p.r)
    tail = 2 * dim_n * 2.0 ** (-(p.L_max + 1) * g) / (1 - 2.0 ** (-g))
    return {
        "frequency": freq,
        "stderr": math.sqrt(max(freq * (1 - freq), 1e-300) / trials),
        "analytic_bound": bound,
        "truncation_tail": tail,
        "trials": trials,
        "excess_searched": [p.r, p.L_max],
        "skeleton": p.skeleton,
    }


def good_separation_check(Q: Cube, R: Cube, p: GoodnessParams) -> bool:
    """dist(Q, boundary of R) >= 1/2 l(Q)^gamma l(R)^(1-gamma)."""
    if R.level - Q.level < p.r:
        raise ValueError("good_separation_check needs l(R) >= 2^r l(Q)")
    dist = box_boundary_distance(Q.lo, Q.hi, R.lo, R.hi)
    return bool(dist >= 0.5 * float(p.threshold(Q.level, R.level)))


def long_distance_dyad(Q: Cube, R: Cube) -> int:
    """The j >= 0 with 2^j < D(Q,R)/l(R) <= 2^(j+1) (j = 0 when the ratio is <= 2)."""
    ratio = geometry(Q, R)["long_distance"] / R.side
    return max(0, math.ceil(math.log2(ratio) - 1e-12) - 1)


def containment_level_check(Q: Cube, R: Cube, j: int, n: int, p: GoodnessParams,
                            r_good: bool = True) -> bool:
    """Whether R lies in the ancestor of Q of generation n + j + theta(j).

    Preconditions: l(R) = 2^n l(Q), D(Q,R) <= 2^(j+1) l(R), and R good
    against the system of Q (``r_good``). The goodness of the larger cube R is
    what the separation argument consumes.
    """
    if R.level - Q.level != n or n < 0:
        raise ValueError("containment_level_check needs l(R) = 2^n l(Q) with n >= 0")
    if geometry(Q, R)["long_distance"] > 2.0 ** (j + 1) * R.side * (1 + 1e-12):
        raise ValueError("containment_level_check needs D(Q,R) <= 2^(j+1) l(R)")
    if not r_good:
        raise ValueError("containment_level_check needs R good")
    anc = Q.system.ancestor(Q, n + j + theta(j, p))
    return anc.contains_cube(R)


# ------------------------------------------------------ boundary regions


def in_boundary_region(points, Q: Cube, eta: float) -> np.ndarray:
    """Membership in (1+2 eta)Q minus (1-2 eta)Q."""
    return Q.dilate_contains(points, 1 + 2 * eta) & ~Q.dilate_contains(points, 1 - 2 * eta)


def _nearby_cubes(system: DyadicSystem, x: np.ndarray, k: int, reach: float) -> list[Cube]:
    seen, out = set(), []
    for e in itertools.product((-1, 0, 1), repeat=system.dim_n):
        c = system.cube_of_point(x + reach * np.asarray(e), k)
        if c.coords not in seen:
            seen.add(c.coords)
            out.append(c)
    return out


def boundary_membership(x, Q: Cube, p: GoodnessParams, opposing: Optional[DyadicSystem] = None) -> dict:
    """in_delta_Q, in_delta_k (union over levels k-r..k+r of Q's system) and in_Q_bad.

    in_Q_bad tests x in Q and x in the boundary region of some cube of the
    ``opposing`` system with side ratio in [2^-r, 2^r]; it is None without one.
    """
    x = np.asarray(x, dtype=float).ravel()
    eta = p.eta
    in_q = bool(in_boundary_region(x[None, :], Q, eta)[0])

    def in_union(system: DyadicSystem) -> bool:
        for k in range(Q.level - p.r, Q.level + p.r + 1):
            for c in _nearby_cubes(system, x, k, eta * 2.0 ** k):
                if in_boundary_region(x[None, :], c, eta)[0]:
                    return True
        return False

    in_k = in_union(Q.system)
    in_bad = None
    if opposing is not None:
        in_bad = bool(Q.contains_points(x[None, :])[0]) and in_union(opposing)
    return {"in_delta_Q": in_q, "in_delta_k": in_k, "in_Q_bad": in_bad}


def boundary_probability_mc(x, k: int, p: GoodnessParams, trials: int, rng=None,
                            window: Optional[tuple[int, int]] = None) -> dict:
    """Frequency of x in the level-k boundary union under random shifts.

    Each level j contributes a band of half-width eta 2^j around the level-j
    grid, so the union over 2r+1 levels has probability <= 2N(2r+1) eta.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=float).ravel()
    n_dim = len(x)
    lo_k = k - p.r - 12 if window is None else window[0]
    hi_k = k + p.r + 1 if window is None else window[1]
    hits = 0
    for _ in range(trials):
        sys = DyadicSystem(ShiftSequence.random(n_dim, lo_k, hi_k, rng))
        cube = sys.cube_of_point(x, k)
        hits += boundary_membership(x, cube, p)["in_delta_k"]
    freq = hits / trials
    return {"frequency": freq, "stderr": math.sqrt(max(freq * (1 - freq), 1e-300) / trials),
            "bound": 2 * n_dim * (2 * p.r + 1) * p.eta, "trials": trials}


# ------------------------------------------------------------- filtrations


@dataclass(frozen=True, eq=False)
class Filtration:
    """Nested partitions of an atom set, finest level first.

    ``labels[i, a]`` is the block of atom a at ``levels[i]``; every block of
    level i is contained in a block of level i+1. Dyadic filtrations also
    carry the system and the integer coordinates of each block.
    """

    levels: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    system: Optional[DyadicSystem] = None
    block_coords: Optional[tuple] = None

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.int64)
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.shape != (len(lv), len(self.weights)):
            raise ValueError("labels must have shape (n_levels, n_atoms)")
        if np.any(np.diff(lv) <= 0):
            raise ValueError("levels must be strictly increasing")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @property
    def n_atoms(self) -> int:
        return self.labels.shape[1]

    def index(self, k: int) -> int:
        hits = np.nonzero(self.levels == k)[0]
        if len(hits) == 0:
            raise ValueError(f"level {k} not in filtration levels {self.levels.tolist()}")
        return int(hits[0])

    def n_blocks(self, i: int) -> int:
        return int(self.labels[i].max()) + 1

    def block_mass(self, i: int) -> np.ndarray:
        return np.bincount(self.labels[i], weights=self.weights, minlength=self.n_blocks(i))

    def parent_of_blocks(self, i: int) -> np.ndarray:
        """Map from blocks of level i to blocks of level i+1."""
        par = np.empty(self.n_blocks(i), dtype=np.int64)
        par[self.labels[i]] = self.labels[i + 1]
        return par

    def is_nested(self) -> bool:
        for i in range(len(self.levels) - 1):
            par = np.full(self.n_blocks(i), -1, dtype=np.int64)
            par[self.labels[i]] = self.labels[i + 1]
            if not np.array_equal(par[self.labels[i]], self.labels[i + 1]):
                return False
        return True

    def cube(self, i: int, block: int) -> Cube:
        if self.system is None:
            raise ValueError("abstract filtration has no cubes")
        return self.system.cube(int(self.levels[i]), self.block_coords[i][block])

    def cond_mean(self, i: int, f: np.ndarray) -> np.ndarray:
        """mu-average of f over the level-i block of each atom."""
        f = np.asarray(f)
        lab = self.labels[i]
        mass = self.block_mass(i)
        wf = f * (self.weights if f.ndim == 1 else self.weights[:, None])
        sums = _group_sum(lab, wf, self.n_blocks(i))
        avg = sums / (mass if f.ndim == 1 else mass[:, None])
        return avg[lab]


def _group_sum(labels: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim == 1:
        if np.iscomplexobj(values):
            return (np.bincount(labels, values.real, n) + 1j * np.bincount(labels, values.imag, n))
        return np.bincount(labels, values, n)
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, labels, values)
    return out


def resolving_level(points: np.ndarray, system: DyadicSystem) -> int:
    """Highest level at which every atom sits in its own cube of ``system``."""
    pts = np.atleast_2d(points)
    if len(pts) < 2:
        return system.shift.k_hi
    from scipy.spatial import cKDTree

    sep = cKDTree(pts).query(pts, k=2)[0][:, 1].min()
    k = int(math.floor(math.log2(sep / math.sqrt(pts.shape[1]))))
    while k + 1 <= system.shift.k_hi:
        c = system.coords_of_points(pts, k + 1)
        if len(np.unique(c, axis=0)) < len(pts):
            break
        k += 1
    return k


def build_tree(points, weights, system: DyadicSystem, top_level: int,
               bottom_level: Optional[int] = None) -> Filtration:
    """Dyadic filtration of the atoms from the atom-resolving level up to ``top_level``.

    Coarser coordinates come from the parent map on integers, so nesting is
    exact regardless of floating point position rounding.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if bottom_level is None:
        bottom_level = min(resolving_level(pts, system), top_level)
    if top_level < bottom_level:
        raise ValueError("top level below the bottom level")
    system._check_level(bottom_level)
    system._check_level(top_level)
    coords = system.coords_of_points(pts, bottom_level)
    levels = np.arange(bottom_level, top_level + 1)
    labels = np.empty((len(levels), len(pts)), dtype=np.int64)
    block_coords = []
    for i, k in enumerate(levels):
        if i > 0:
            coords = system.parent_coords(coords, int(k) - 1)
        uniq, inv = np.unique(coords, axis=0, return_inverse=True)
        labels[i] = inv.ravel()
        block_coords.append(uniq)
    return Filtration(levels, labels, np.asarray(weights, dtype=float), system, tuple(block_coords))


def abstract_filtration(labels: Sequence[Sequence[int]], weights, levels=None) -> Filtration:
    """Filtration from explicit per-level block labels (finest first)."""
    labels = np.asarray(labels, dtype=np.int64)
    relabeled = np.array([np.unique(row, return_inverse=True)[1].ravel() for row in labels])
    if levels is None:
        levels = np.arange(len(labels))
    filt = Filtration(np.asarray(levels), relabeled, np.asarray(weights, dtype=float))
    if not filt.is_nested():
        raise ValueError("partitions are not nested")
    return filt


# -------------------------------------------------------- random systems


@dataclass(frozen=True, eq=False)
class RandomSystems:
    """The four shift sequences of an experiment: beta, beta', beta~, beta~'."""

    beta: ShiftSequence
    beta_p: ShiftSequence
    beta_t: ShiftSequence
    beta_tp: ShiftSequence

    @classmethod
    def draw(cls, dim_n: int, k_lo: int, k_hi: int, rng=None) -> "RandomSystems":
        rng = np.random.default_rng(rng)
        return cls(*(ShiftSequence.random(dim_n, k_lo, k_hi, rng) for _ in range(4)))

    @property
    def D(self) -> DyadicSystem:
        return DyadicSystem(self.beta, name="D")

    @property
    def Dp(self) -> DyadicSystem:
        return DyadicSystem(self.beta_p, name="D'")

    def good_mask(self, tree: Filtration, i: int, p: GoodnessParams, primed: bool = False) -> np.ndarray:
        """Goodness of every block at level index i of a tree built on D (or D')."""
        if primed:
            return good_mask(tree.system, int(tree.levels[i]), tree.block_coords[i], self.beta, self.beta_t, p)
        return good_mask(tree.system, int(tree.levels[i]), tree.block_coords[i], self.beta_p, self.beta_tp, p)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("beta", "beta_p", "beta_t", "beta_tp")}


def classification_rows(tree: Filtration, systems: RandomSystems, p: GoodnessParams,
                        primed: bool = False) -> list[dict]:
    """Per-cube rows: level, coords, good flag and the first bad excess."""
    other, other_t = (systems.beta, systems.beta_t) if primed else (systems.beta_p, systems.beta_tp)
    rows = []
    for i, k in enumerate(tree.levels):
        coords = tree.block_coords[i]
        lo = tree.system.offset(int(k)) + 2.0 ** int(k) * coords
        hyb = ShiftSequence.hybrid(other_t, other, int(k))
        exc = bad_excess(lo, int(k), hyb, p)
        for c, e in zip(coords, exc):
            rows.append({"level": int(k), "coords": " ".join(map(str, c)), "good": bool(e < 0),
                         "bad_excess": int(e)})
    return rows


# ------------------------------------------------------- property sweeps


def separation_sweep(p: GoodnessParams, draws: int = 1000, cubes_per_draw: int = 8, dim_n: int = 1,
                     rng=None, span: int = 10) -> dict:
    """Check the half-threshold separation for every good cube over random shift draws.

    Each draw samples the four shift sequences on [-20, L_max] and
    ``cubes_per_draw`` level-0 cubes Q of D. Good cubes (against the hybrid
    of beta~' and beta') are compared with every cube R of D' containing
    them or straddled by them at levels r..L_max; this is the vectorized form
    of good_separation_check.
    """
    rng = np.random.default_rng(rng)
    good = checked = violations = 0
    levels = np.arange(p.r, p.L_max + 1)
    half_thr = 0.5 * p.threshold(0, levels)
    for _ in range(draws):
        sysm = RandomSystems.draw(dim_n, -20, p.L_max, rng)
        off0 = sysm.beta.offset(0)
        lo_q = np.floor(rng.uniform(0, 2.0 ** span, size=(cubes_per_draw, dim_n)) - off0) + off0
        hyb = ShiftSequence.hybrid(sysm.beta_tp, sysm.beta_p, 0)
        lo_q = lo_q[bad_excess(lo_q, 0, hyb, p) < 0]
        if not len(lo_q):
            continue
        good += len(lo_q)
        for k, h in zip(levels, half_thr):
            side = 2.0 ** int(k)
            off = sysm.beta_p.offset(int(k))
            # R is the cube of D' holding the lower corner of Q; a straddle gives a negative margin
            lo_r = off + side * np.floor((lo_q - off) / side)
            inside = np.minimum(lo_q - lo_r, lo_r + side - (lo_q + 1.0)).min(axis=1)
            checked += len(lo_q)
            violations += int(np.sum(inside < h))
    return {"draws": draws, "good_cubes": good, "pairs_checked": checked, "violations": violations,
            "fraction_ok": 1.0 - violations / checked if checked else 1.0}


def containment_sweep(p: GoodnessParams, pairs: int = 10000, dim_n: int = 1, rng=None,
                      max_n: int = 4, max_j: int = 3, per_draw: int = 64, max_draws: int = 100000,
                      require_good: bool = True) -> dict:
    """Count violations of R inside the ancestor of Q of generation n + j + theta(j).

    Q is a level-0 cube of D and R a level-n cube of D' at long distance
    D(Q,R) <= 2^(j+1) l(R). A pair is eligible when R is good against the
    hybrid of beta~ and beta and the ancestor level stays inside the
    searched excess range. ``require_good=False`` drops the goodness filter,
    which shows that the property genuinely depends on it.
    """
    rng = np.random.default_rng(rng)
    eligible = violations = draws = 0
    by_j = {}
    while eligible < pairs and draws < max_draws:
        draws += 1
        sysm = RandomSystems.draw(dim_n, -20, p.L_max, rng)
        D, Dp = sysm.D, sysm.Dp
        ns = rng.integers(0, max_n + 1, size=per_draw)
        reach = np.exp2(ns + rng.integers(0, max_j + 1, size=per_draw))[:, None]
        x = rng.uniform(0, 2.0 ** 12, size=(per_draw, dim_n))
        y = x + rng.uniform(-1, 1, size=(per_draw, dim_n)) * reach
        for n in np.unique(ns):
            n = int(n)
            sel = np.nonzero(ns == n)[0]
            rc = Dp.coords_of_points(y[sel], n)
            ok = good_mask(Dp, n, rc, sysm.beta, sysm.beta_t, p) if require_good else np.ones(len(sel), bool)
            for a, c in zip(sel[ok], rc[ok]):
                Q = D.cube_of_point(x[a], 0)
                R = Dp.cube(n, c)
                j = long_distance_dyad(Q, R)
                if n + j + theta(j, p) > p.L_max:
                    continue
                eligible += 1
                by_j[j] = by_j.get(j, 0) + 1
                violations += not containment_level_check(Q, R, j, n, p, r_good=True)
    return {"eligible": eligible, "violations": violations, "draws": draws, "by_j": dict(sorted(by_j.items()))}
