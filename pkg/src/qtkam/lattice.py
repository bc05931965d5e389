"""Exact integer-lattice geometry.

Implements the sign-lexicographic order, optimal presentations of points
and affine subspaces by short integer vectors, cut classification of the
resulting coefficient vectors, the standard-cut tower construction, good
portions of subspaces, and the decomposition of the ambient lattice into
a generic bucket, good portions along subspaces, and a bounded core.

All classification arithmetic is exact (integers, Fractions, PowVal
thresholds); floats appear only in reporting fields.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from qtkam.intlinalg import IntVec, SpanChecker, dot, in_span, integer_kernel, \
    gram_solve, rank, solve_integer
from qtkam.params import CutParams, LatticeParams, Problem
from qtkam.thresholds import PowVal, npow, pv_max


# -- sign-lexicographic order ---------------------------------------------


def signlex_key(a: Sequence[int]) -> tuple:
    """Sort key realizing the sign-lex order: (|a_1|,...,|a_s|, -a_1,...,-a_s).

    Comparing keys ascending compares abs-tuples lexicographically first;
    on ties the lexicographically larger vector wins (is smaller).
    """
    return tuple(abs(x) for x in a) + tuple(-x for x in a)


def signlex_compare(a: Sequence[int], b: Sequence[int]) -> int:
    """Three-way sign-lex comparison: -1 (less), 0 (equal), +1 (greater)."""
    if len(a) != len(b):
        raise ValueError("length mismatch")
    ka, kb = signlex_key(a), signlex_key(b)
    return -1 if ka < kb else (0 if ka == kb else 1)


def signlex_min(items: Iterable[Sequence[int]]) -> tuple:
    """Unique sign-lex minimum of a nonempty finite collection."""
    best = None
    for it in items:
        t = tuple(it)
        if best is None or signlex_key(t) < signlex_key(best):
            best = t
    if best is None:
        raise ValueError("empty collection has no minimum")
    return best


# -- the ball of short vectors --------------------------------------------


@lru_cache(maxsize=64)
def _ball_cached(d: int, bound_sq: int) -> tuple:
    if bound_sq <= 1:
        return ()
    m = math.isqrt(bound_sq - 1)
    out = [v for v in itertools.product(range(-m, m + 1), repeat=d)
           if any(v) and sum(x * x for x in v) < bound_sq]
    out.sort(key=signlex_key)
    return tuple(out)


def ball_vectors(N: int, problem: Problem) -> tuple:
    """All nonzero integer vectors with |x| < C1*N, sign-lex ascending."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return _ball_cached(problem.d, (problem.C1 * N) ** 2)


def enumerate_ball(N: int, problem: Problem, lp: Optional[LatticeParams] = None
                   ) -> Iterator[IntVec]:
    """Stream the ball in ascending sign-lex order (finite)."""
    return iter(ball_vectors(N, problem))


def span_membership(v: IntVec, basis: Sequence[IntVec]) -> bool:
    """True iff v lies in the rational span of the basis vectors."""
    return in_span(v, basis)


# -- presentations ---------------------------------------------------------


@dataclass(frozen=True)
class Presentation:
    """An affine subspace {x : v_i . x = p_i, i = 1..ell} of codimension ell.

    rows holds (v_i, p_i) pairs; the v_i must be linearly independent.
    Optimal presentations additionally satisfy 0 <= p_1 <= ... <= p_ell.
    """

    rows: tuple

    def __post_init__(self):
        rows = tuple((tuple(int(x) for x in v), int(p)) for v, p in self.rows)
        object.__setattr__(self, "rows", rows)

    @property
    def ell(self) -> int:
        return len(self.rows)

    @property
    def d(self) -> int:
        return len(self.rows[0][0]) if self.rows else 0

    @property
    def pvec(self) -> tuple:
        return tuple(p for _, p in self.rows)

    @property
    def vectors(self) -> tuple:
        return tuple(v for v, _ in self.rows)

    def concat(self) -> tuple:
        out = list(self.pvec)
        for v in self.vectors:
            out.extend(v)
        return tuple(out)

    def key(self) -> tuple:
        return signlex_key(self.concat())

    def prefix(self, j: int) -> "Presentation":
        return Presentation(rows=self.rows[:j])

    def contains_point(self, x: Sequence[int]) -> bool:
        return all(dot(v, x) == p for v, p in self.rows)

    def direction_basis(self) -> list:
        """Saturated integer basis of the parallel linear subspace."""
        if not self.rows:
            raise ValueError("empty presentation has no fixed dimension")
        return integer_kernel([list(v) for v in self.vectors])

    def label(self) -> str:
        ps = ",".join(str(p) for p in self.pvec)
        vs = ";".join("(" + ",".join(str(x) for x in v) + ")" for v in self.vectors)
        return f"[{ps}|{vs}]"


def _normalize_subspace(A, d: int):
    """Accept a point or an (offset, directions) pair; return (offset, dirs)."""
    if isinstance(A, Presentation):
        off = solve_integer([list(v) for v in A.vectors], list(A.pvec))
        if off is None:
            raise ValueError("presentation has no integer point")
        return tuple(off), [tuple(u) for u in A.direction_basis()]
    seq = tuple(A)
    if seq and isinstance(seq[0], int):
        if len(seq) != d:
            raise ValueError(f"point must have length {d}")
        return seq, []
    offset, dirs = seq
    offset = tuple(int(x) for x in offset)
    dirs = [tuple(int(x) for x in u) for u in dirs]
    if len(offset) != d or any(len(u) != d for u in dirs):
        raise ValueError(f"offset and directions must have length {d}")
    return offset, dirs


def optimal_presentation(A, N: int, problem: Problem,
                         lp: Optional[LatticeParams] = None
                         ) -> Optional[Presentation]:
    """Sign-lex minimal presentation of A by vectors of the ball, or None.

    A is a point (tuple of ints) or an (offset point, direction list) pair.
    The minimum is over all presentations (p_1..p_ell; v_1..v_ell) with
    every v_i in the ball, compared as concatenated integer vectors, the
    p block first.  None means no ball presentation exists.
    """
    d = problem.d
    offset, dirs = _normalize_subspace(A, d)
    ell = d - rank(dirs)
    if ell == 0:
        raise ValueError("subspace has codimension 0")
    ball = ball_vectors(N, problem)
    cands = [v for v in ball if all(dot(v, u) == 0 for u in dirs)]
    if rank(cands) < ell:
        return None

    # minimal abs-p vector: greedy minimum-weight independent set
    weights = {v: abs(dot(v, offset)) for v in cands}
    greedy_order = sorted(cands, key=lambda v: weights[v])
    sc = SpanChecker(d)
    avec = []
    for v in greedy_order:
        if sc.add(v):
            avec.append(weights[v])
            if len(avec) == ell:
                break
    # per-level candidate lists in sign-lex order
    levels = [[v for v in cands if weights[v] == a] for a in avec]

    best_key = None
    best_rows = None
    prefix_rows: list = []
    prefix_abs: list = []

    def rec(i: int, sc: SpanChecker):
        nonlocal best_key, best_rows
        for v in levels[i]:
            if sc.contains(v):
                continue
            vabs = [abs(x) for x in v]
            if best_key is not None:
                # compare the abs(v) prefix against the best leaf's
                j = (len(prefix_abs) + len(vabs))
                cand_abs = prefix_abs + vabs
                best_abs = list(best_key[ell:ell + j])
                if cand_abs > best_abs:
                    break  # candidates are abs-ascending: prune the rest
            sc2 = sc.copy()
            sc2.add(v)
            prefix_rows.append((v, dot(v, offset)))
            prefix_abs.extend(vabs)
            if i + 1 == ell:
                pres = Presentation(rows=tuple(prefix_rows))
                k = pres.key()
                if best_key is None or k < best_key:
                    best_key, best_rows = k, pres.rows
            else:
                rec(i + 1, sc2)
            prefix_rows.pop()
            del prefix_abs[-len(vabs):]

    rec(0, SpanChecker(d))
    return Presentation(rows=best_rows)


def required_N(A, problem: Problem, max_N: int = 4096) -> Optional[int]:
    """Smallest N for which A admits a ball presentation, or None."""
    d = problem.d
    offset, dirs = _normalize_subspace(A, d)
    ell = d - rank(dirs)
    for N in range(1, max_N + 1):
        cands = [v for v in ball_vectors(N, problem)
                 if all(dot(v, u) == 0 for u in dirs)]
        if rank(cands) >= ell:
            return N
    return None


# -- cuts ------------------------------------------------------------------


@dataclass(frozen=True)
class Cut:
    """A cut level ell for a point, with its associated subspace prefix."""

    ell: int
    subspace: Optional[Presentation]
    cut_params: CutParams
    presentation: Presentation


def find_cut(m: Sequence[int], cp: CutParams, problem: Problem,
             lp: LatticeParams) -> Optional[Cut]:
    """The unique cut level of m for the given parameters, or None.

    ell qualifies when p_ell < mu*N^tau and p_{ell+1} > theta*N^(gap*tau),
    with p_0 = 0 and p_{d+1} = infinity.
    """
    m = tuple(int(x) for x in m)
    if not problem.is_normal_site(m):
        raise ValueError(f"{m} is a tangential site")
    pres = optimal_presentation(m, cp.N, problem, lp)
    if pres is None:
        return None
    d = problem.d
    g = lp.gap_for(d)
    low = cp.low_threshold()
    high = cp.high_threshold(g)
    p = pres.pvec
    for ell in range(d + 1):
        p_ell = 0 if ell == 0 else p[ell - 1]
        if not low > p_ell:
            continue
        if ell < d and not high < p[ell]:
            continue
        sub = pres.prefix(ell) if ell > 0 else None
        return Cut(ell=ell, subspace=sub, cut_params=cp, presentation=pres)
    return None


# -- standard cuts ---------------------------------------------------------


def _exact_log(base: int, x: Fraction) -> Optional[Fraction]:
    # integer exponents only: x == base**k
    if x <= 0 or base <= 1:
        return None
    p, q = x.numerator, x.denominator
    if q == 1:
        if p == 1:
            return Fraction(0)
        k = 0
        while p % base == 0:
            p //= base
            k += 1
        return Fraction(k) if p == 1 else None
    if p == 1:
        k = 0
        while q % base == 0:
            q //= base
            k += 1
        return Fraction(-k) if q == 1 else None
    return None


def tower_thresholds(N: int, problem: Problem, lp: LatticeParams) -> list:
    """Thresholds T_1..T_d: T_1 = C*N^(g*tau0), T_{i+1} = C*(T_i/c)^g."""
    d = problem.d
    g = lp.gap_for(d)
    T = [PowVal(lp.C, N, Fraction(g) * lp.tau0)]
    for _ in range(d - 1):
        T.append(lp.C * (T[-1] / lp.c) ** g)
    return T


@dataclass(frozen=True)
class StandardCut:
    """Result of the standard-cut construction for a point.

    tau is exact (a Fraction) when the level threshold is an exact power
    of N, otherwise a float approximation; low/high are the exact
    thresholds c*N^tau and C*N^(gap*tau) actually used.
    """

    ell: int
    tau: Union[Fraction, float]
    tau_exact: bool
    level: int                      # index i with c*N^rho_i = T_i; d for the top case
    low: PowVal                     # c*N^tau
    high: Optional[PowVal]          # C*N^(gap*tau); None for the top case
    presentation: Presentation

    @property
    def subspace(self) -> Optional[Presentation]:
        return self.presentation.prefix(self.ell) if self.ell else None


def standard_cut(m: Sequence[int], N: int, problem: Problem,
                 lp: LatticeParams) -> StandardCut:
    """Classify a point by the threshold tower (no theta/mu parameters).

    Case analysis: p_d at most the top threshold gives ell = d; otherwise
    p_1 >= T_1 gives ell = 0; otherwise the first tower interval free of
    {p_2..p_{d-1}} fixes the level and ell.
    """
    m = tuple(int(x) for x in m)
    if not problem.is_normal_site(m):
        raise ValueError(f"{m} is a tangential site")
    pres = optimal_presentation(m, N, problem, lp)
    if pres is None:
        raise ValueError(f"no ball presentation of {m} at N={N}")
    d = problem.d
    g = lp.gap_for(d)
    p = pres.pvec
    T = tower_thresholds(N, problem, lp)

    def tau_of(low: PowVal):
        # N^tau = low / c; tau exact when the leftover mantissa is a power of N
        ratio = low / lp.c
        extra = _exact_log(N, ratio.mantissa)
        if extra is not None:
            return ratio.exponent + extra, True
        return ratio.log10() / math.log10(N), False

    if lp.mode == "paper":
        top = PowVal(lp.c, N, lp.tau1 / g)
        if not T[-1] <= top:
            raise ValueError("tower exceeds the top threshold; "
                             "parameters violate the standing inequalities")
    else:
        top = T[-1]

    if p[d - 1] <= top:
        tau, exact = tau_of(top)
        return StandardCut(ell=d, tau=tau, tau_exact=exact, level=d,
                           low=top, high=None, presentation=pres)
    if p[0] >= T[0]:
        low = PowVal(lp.c, N, lp.tau0)
        return StandardCut(ell=0, tau=lp.tau0, tau_exact=True, level=0,
                           low=low, high=T[0], presentation=pres)
    middle = p[1:d - 1]
    for i in range(d - 1):
        if any(T[i] < q < T[i + 1] for q in middle):
            continue
        ell = max(j for j in range(1, d + 1) if not T[i] < p[j - 1])
        if ell < d and not p[ell] >= T[i + 1]:
            raise RuntimeError("tower interval not separating; "
                               "this contradicts the construction")
        tau, exact = tau_of(T[i])
        return StandardCut(ell=ell, tau=tau, tau_exact=exact, level=i + 1,
                           low=T[i], high=T[i + 1], presentation=pres)
    raise RuntimeError("no empty tower interval; this contradicts pigeonhole")


# -- good portions ---------------------------------------------------------


def _as_radius(radius, N: int, lp: LatticeParams) -> Union[PowVal, Fraction]:
    if radius is None:
        return npow(N, lp.tau1)
    if isinstance(radius, PowVal):
        return radius
    return Fraction(radius)


def good_portion_threshold(p_ell: int, N: int, problem: Problem,
                           lp: LatticeParams):
    """C * max(N^(g*tau0), (p_ell/c)^g), exact."""
    g = lp.gap_for(problem.d)
    a = PowVal(lp.C, N, Fraction(g) * lp.tau0)
    b = lp.C * (Fraction(p_ell) / lp.c) ** g
    return a if a >= b else b


def _portion_tester(A: Presentation, N: int, problem: Problem,
                    lp: LatticeParams, radius=None):
    """Point test for A's good portion with the per-subspace work
    (span, transversal list, threshold ceiling) hoisted out; candidates
    must already lie on A."""
    rad = _as_radius(radius, N, lp)
    rad2 = rad * rad
    rad_is_pv = isinstance(rad2, PowVal)
    thr = good_portion_threshold(A.pvec[-1], N, problem, lp)
    # integer points only meet the inclusive bar at its ceiling
    thr_int = None
    try:
        f = thr.as_fraction() if isinstance(thr, PowVal) else Fraction(thr)
        thr_int = -((-f.numerator) // f.denominator)
    except (TypeError, ValueError):
        pass
    span = SpanChecker(problem.d)
    for v, _ in A.rows:
        span.add(v)
    transversal = [v for v in ball_vectors(N, problem)
                   if not span.contains(v)]

    def test(x) -> bool:
        x2 = sum(t * t for t in x)
        if rad_is_pv:
            if not rad2 < x2:
                return False
        elif not x2 > rad2:
            return False
        for v in transversal:
            val = abs(dot(v, x))
            if thr_int is not None:
                if val < thr_int:
                    return False
            elif (thr > val) if isinstance(thr, PowVal) else (val < thr):
                return False
        return True

    return test


def good_portion_contains(A: Presentation, x: Sequence[int], N: int,
                          problem: Problem, lp: LatticeParams,
                          radius=None) -> bool:
    """Membership of x in the good portion of A.

    True iff |x| > radius and |(v, x)| clears the level threshold for
    every ball vector v outside the span of A's normals.  The radius
    defaults to N^tau1.  A may be a Presentation or any subspace
    accepted by optimal_presentation.
    """
    if not isinstance(A, Presentation):
        pres = optimal_presentation(A, N, problem, lp)
        if pres is None:
            raise ValueError("subspace admits no presentation at this N")
        A = pres
    x = tuple(int(x_) for x_ in x)
    if not A.contains_point(x):
        raise ValueError(f"{x} does not lie on {A.label()}")
    if not (1 <= A.ell < problem.d):
        raise ValueError("good portions are defined for 0 < ell < d")
    if not _portion_tester(A, N, problem, lp, radius=radius)(x):
        return False
    return True


def choose_good_point(A: Presentation, N: int, bound: int, problem: Problem,
                      lp: LatticeParams, radius=None) -> Optional[IntVec]:
    """Sign-lex minimal lattice point of A's good portion with |x| <= bound.

    Deterministic; None when the portion meets no lattice point in the
    ball of radius bound.
    """
    if not isinstance(A, Presentation):
        pres = optimal_presentation(A, N, problem, lp)
        if pres is None:
            return None
        A = pres
    if not (1 <= A.ell < problem.d):
        raise ValueError("good portions are defined for 0 < ell < d")
    vrows = [list(v) for v in A.vectors]
    x0 = solve_integer(vrows, list(A.pvec))
    if x0 is None:
        return None
    dirs = A.direction_basis()
    cands = []
    if not dirs:
        cands = [tuple(x0)]
    else:
        x0n = math.sqrt(sum(t * t for t in x0))
        # coefficient box: t_i = u_i.(x - x0) with u_i the dual basis rows
        cols = [gram_solve(dirs, [1 if j == i else 0 for j in range(problem.d)])
                for i in range(problem.d)]
        ranges = []
        for i in range(len(dirs)):
            norm = math.sqrt(sum(float(cols[j][i]) ** 2 for j in range(problem.d)))
            M = int(norm * (bound + x0n)) + 1
            ranges.append(range(-M, M + 1))
        b2 = bound * bound
        for t in itertools.product(*ranges):
            x = tuple(x0[j] + sum(t[i] * dirs[i][j] for i in range(len(dirs)))
                      for j in range(problem.d))
            if sum(c * c for c in x) <= b2:
                cands.append(x)
    # sign-lex order makes the first hit the minimal one
    inside = _portion_tester(A, N, problem, lp, radius=radius)
    for x in sorted(cands, key=signlex_key):
        if not problem.is_normal_site(x):
            continue
        if inside(x):
            return x
    return None


# -- decomposition of a region ---------------------------------------------


@dataclass
class Decomposition:
    """Partition of a finite box of lattice points.

    core: |m| <= radius; a0: the generic bucket (p_1 over the T_1
    threshold); portions: good-portion members keyed by their subspace;
    uncovered: points the coverage argument fails for (empty on success).
    """

    N: int
    radius: Union[Fraction, PowVal]
    a0: set
    portions: dict
    core: set
    uncovered: set

    def counts(self) -> dict:
        return {"core": len(self.core), "a0": len(self.a0),
                "portions": sum(len(s) for s in self.portions.values()),
                "portion_count": len(self.portions),
                "uncovered": len(self.uncovered)}


def _classify_point(m, N, problem, lp, radius, rad2_num, rad2_den, T1):
    x2 = sum(t * t for t in m)
    if x2 * rad2_den <= rad2_num:
        return ("core", None)
    sc = standard_cut(m, N, problem, lp)
    if sc.ell == 0 or sc.presentation.pvec[0] >= T1:
        return ("a0", None)
    if sc.ell == problem.d:
        return ("uncovered", None)
    A = sc.subspace
    if good_portion_contains(A, m, N, problem, lp, radius=radius):
        return ("portion", A)
    return ("uncovered", None)


def _radius_sq_ratio(rad) -> tuple:
    # (num, den) with |m|^2 <= radius^2  <=>  |m|^2 * den <= num
    if isinstance(rad, PowVal):
        r2 = (rad * rad).as_fraction()
    else:
        r2 = Fraction(rad) ** 2
    return r2.numerator, r2.denominator


def decompose_region(box, N: int, problem: Problem, lp: LatticeParams,
                     radius=None) -> Decomposition:
    """Classify every non-site point of an axis-aligned integer box.

    box is a d-tuple of inclusive (lo, hi) pairs.  Points split into
    core (inside the radius), the generic a0 bucket, exactly one good
    portion each, or uncovered.  radius defaults to N^tau1.
    """
    d = problem.d
    if len(box) != d:
        raise ValueError(f"box must have {d} coordinate ranges")
    rad = _as_radius(radius, N, lp)
    rn, rdn = _radius_sq_ratio(rad)
    T = tower_thresholds(N, problem, lp)
    t1 = T[0].as_fraction() if T[0].exponent.denominator == 1 else None

    dec = Decomposition(N=N, radius=rad, a0=set(), portions={}, core=set(),
                        uncovered=set())
    if d == 2 and t1 is not None:
        _decompose_fast_2d(box, N, problem, lp, rad, rn, rdn, t1, dec)
        return dec
    for m in itertools.product(*[range(lo, hi + 1) for lo, hi in box]):
        if not problem.is_normal_site(m):
            continue
        kind, A = _classify_point(m, N, problem, lp, rad, rn, rdn,
                                  T[0])
        if kind == "core":
            dec.core.add(m)
        elif kind == "a0":
            dec.a0.add(m)
        elif kind == "portion":
            dec.portions.setdefault(A, set()).add(m)
        else:
            dec.uncovered.add(m)
    return dec


def _decompose_fast_2d(box, N, problem, lp, rad, rn, rdn, t1, dec):
    """Vectorized classifier for d=2: per-direction weights via numpy.

    Valid because for d=2 the abs-p vector of a point is (min, second-min)
    of |m.u| over primitive ball directions u, the two minima taken over
    non-parallel directions.
    """
    ball = ball_vectors(N, problem)
    dirs, seen = [], set()
    for v in ball:  # sign-lex order; keep first representative per direction
        g = math.gcd(*[abs(x) for x in v])
        u = tuple(x // g for x in v)
        cu = max(u, tuple(-x for x in u))  # plain-lex larger: canonical sign
        if cu not in seen:
            seen.add(cu)
            dirs.append(cu)
    U = np.array(dirs, dtype=np.int64)
    (lo0, hi0), (lo1, hi1) = box
    xs = np.arange(lo0, hi0 + 1, dtype=np.int64)
    ys = np.arange(lo1, hi1 + 1, dtype=np.int64)
    X = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    site_mask = np.zeros(len(X), dtype=bool)
    for s in problem.sites:
        site_mask |= (X[:, 0] == s[0]) & (X[:, 1] == s[1])
    X = X[~site_mask]

    D = X @ U.T
    W = np.abs(D)
    j1 = W.argmin(axis=1)
    a1 = W[np.arange(len(X)), j1]
    W2 = W.copy()
    W2[np.arange(len(X)), j1] = np.iinfo(np.int64).max
    a2 = W2.min(axis=1)

    x2 = (X * X).sum(axis=1)
    core = x2 * rdn <= rn
    in_a0 = (~core) & (a1 * t1.denominator >= t1.numerator)

    T = tower_thresholds(N, problem, lp)
    t2 = T[1].as_fraction() if T[1].exponent.denominator == 1 else None
    rest = ~(core | in_a0)
    if t2 is None:
        ell1 = np.zeros(len(X), dtype=bool)  # fall back to slow path below
    else:
        ell1 = rest & (a2 * t2.denominator > t2.numerator)
    # good-portion inequality: a2 >= C*max(N^(g*tau0), (a1/c)^g)
    g = lp.gap_for(2)
    A_thr = PowVal(lp.C, N, Fraction(g) * lp.tau0)
    af = A_thr.as_fraction() if A_thr.exponent.denominator == 1 else None
    good = np.zeros(len(X), dtype=bool)
    if af is not None:
        cn, cd = Fraction(lp.c).numerator, Fraction(lp.c).denominator
        Cn, Cd = Fraction(lp.C).numerator, Fraction(lp.C).denominator
        lhs = a2 * af.denominator >= af.numerator
        rhs = a2 * Cd * (cn ** g) >= Cn * (cd ** g) * (a1.astype(object) ** g)
        good = ell1 & lhs & np.asarray(rhs, dtype=bool)

    dec.core.update(map(tuple, X[core].tolist()))
    dec.a0.update(map(tuple, X[in_a0].tolist()))
    slow = rest & ~(ell1 & good)
    for m in map(tuple, X[slow].tolist()):
        kind, A = _classify_point(m, N, problem, lp, rad, rn, rdn, T[0])
        if kind == "core":
            dec.core.add(m)
        elif kind == "a0":
            dec.a0.add(m)
        elif kind == "portion":
            dec.portions.setdefault(A, set()).add(m)
        else:
            dec.uncovered.add(m)
    # portion keys for the vectorized members: v_1 = +-u with p_1 = |m.u| >= 0
    sel = np.nonzero(ell1 & good)[0]
    for idx in sel.tolist():
        m = tuple(int(t) for t in X[idx])
        jd = int(j1[idx])
        u = dirs[jd]
        p1 = int(a1[idx])
        dval = int(D[idx, jd])
        if p1 == 0:
            v1 = u
        else:
            v1 = u if dval > 0 else tuple(-t for t in u)
        A = Presentation(rows=((v1, p1),))
        dec.portions.setdefault(A, set()).add(m)


def count_subspaces_bound(N: int, ell: int, p: int, problem: Problem) -> int:
    """Upper bound (2*C1*N)^(ell*d) * (2p)^ell on subspace counts."""
    if ell < 1 or p < 0:
        raise ValueError("need ell >= 1 and p >= 0")
    return (2 * problem.C1 * N) ** (ell * problem.d) * (2 * p) ** ell
