"""KAM engine for NLS-type normal forms.

Builds the tangential/normal normal form, checks the second Melnikov
conditions on a parameter grid, solves the homological equation by
eigenvalue division, performs one quadratic-convergence step with the
time integral evaluated exactly, and iterates a schedule.

Everything here runs in float coefficient mode; the exact-arithmetic
identities live in the series layer.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from random import Random
from typing import Callable, Mapping, Optional, Sequence

from qtkam.intlinalg import SpanChecker, dot, integer_kernel, solve_integer
from qtkam.lattice import (
    Presentation,
    ball_vectors,
    choose_good_point,
    find_cut,
    signlex_key,
)
from qtkam.params import AnalysisParams, LatticeParams, CutParams, Problem
from qtkam.series import (
    Mono,
    Series,
    Values,
    XiGrid,
    grid_for,
    momentum_k,
    poisson_bracket,
    pred_degree_le,
    pred_k_le,
    project,
    lie_transform,
    series,
    series_add,
    series_dI,
    series_dtheta,
    series_dz,
    series_scale,
    series_sub,
    vector_field_norm,
    zero_series,
)
from qtkam.toeplitz import diagonal_decompose, quasi_toeplitz_norm

Site = tuple


class KamError(RuntimeError):
    """Raised when a step's hypotheses fail hard (paper mode)."""


def _norm_sq(site: Sequence[int]) -> int:
    return sum(int(x) * int(x) for x in site)


# -- normal form ---------------------------------------------------------------


@dataclass
class NormalForm:
    """<omega(xi), I> + sum_n Omega_n(xi) |z_n|^2 sampled on a grid.

    e is a scalar offset per grid point, omega[g] the b tangential
    frequencies at grid point g, omega_tilde a sparse site -> per-point
    correction with Omega_n = |n|^2 + omega_tilde[n].  M is the twist
    constant of xi -> omega: along a direction a with <k, a> = |k| the
    derivative of <omega, k> is at least M(|k| - M L), which drives the
    resonant-measure bound; it equals 1 for the affine family.  L
    bounds the size of the omega_tilde corrections, and the measure
    argument needs L*M < 1/2.
    """

    e: tuple
    omega: tuple
    omega_tilde: dict
    grid: XiGrid
    M: float
    L: float
    omega_fn: Optional[Callable] = None

    def __post_init__(self):
        size = self.grid.size
        e = tuple(float(x) for x in self.e)
        if len(e) != size:
            raise ValueError("offset table must have one entry per grid point")
        om = tuple(tuple(float(w) for w in row) for row in self.omega)
        if len(om) != size or any(len(row) != self.grid.b for row in om):
            raise ValueError("omega table must be grid.size x b")
        ot = {tuple(int(x) for x in s): tuple(float(v) for v in vals)
              for s, vals in self.omega_tilde.items()}
        if any(len(vals) != size for vals in ot.values()):
            raise ValueError("omega_tilde rows must have one entry per "
                             "grid point")
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "omega_tilde", ot)
        if self.L * self.M >= 0.5:
            raise ValueError(f"L*M = {self.L * self.M} violates L*M < 1/2")

    @property
    def b(self) -> int:
        return self.grid.b

    def omega_at(self, g: int) -> tuple:
        return self.omega[g]

    def Omega(self, site: Site, g: int) -> float:
        tilde = self.omega_tilde.get(tuple(site))
        return _norm_sq(site) + (tilde[g] if tilde is not None else 0.0)

    def eigenvalue(self, m: Mono, g: int) -> float:
        """<k, omega> + sum_n Omega_n (alpha_n - beta_n) at grid point g."""
        om = self.omega[g]
        val = sum(ki * wi for ki, wi in zip(m.k, om))
        for site, exp in m.alpha:
            val += exp * self.Omega(site, g)
        for site, exp in m.beta:
            val -= exp * self.Omega(site, g)
        return val

    def copy(self) -> "NormalForm":
        return NormalForm(e=self.e, omega=self.omega,
                          omega_tilde=dict(self.omega_tilde), grid=self.grid,
                          M=self.M, L=self.L, omega_fn=self.omega_fn)


def nf_bracket(nf: NormalForm, F: Series) -> Series:
    """{N, F}: multiplies each coefficient by i * eigenvalue, per point."""
    def scale(m: Mono, vals: Values) -> Values:
        return tuple(v * (1j * nf.eigenvalue(m, g))
                     for g, v in enumerate(vals))
    return F.map_coeffs(scale)


# -- NLS construction ----------------------------------------------------------


@dataclass(frozen=True)
class NlsTruncation:
    """Finite window for the nonlinearity expansion.

    normal_sites is the explicit normal-mode support; degree_max bounds
    2|l| + |alpha| + |beta| of every kept monomial.
    """

    normal_sites: tuple
    degree_max: int = 4

    def __post_init__(self):
        sites = tuple(tuple(int(x) for x in s) for s in self.normal_sites)
        object.__setattr__(self, "normal_sites", sites)
        if self.degree_max < 0:
            raise ValueError("degree_max must be nonnegative")


def _binom_frac(s: Fraction, t: int) -> Fraction:
    out = Fraction(1)
    for i in range(t):
        out *= (s - i) / (t - i)
    return out


def build_nls(problem: Problem, p: int, I0: Sequence[float],
              trunc: NlsTruncation, grid: XiGrid, r: float,
              strength: float = 1.0) -> tuple[NormalForm, Series]:
    """Normal form and perturbation of u_t = i(Du + strength |u|^(2p-2) u).

    Tangential modes get action-angle coordinates around the amplitudes
    I0, normal modes stay linear; the |u|^(2p) integral expands into the
    momentum-conserving monomial sum, with square roots Taylor-expanded
    in the actions up to trunc.degree_max.
    """
    if p < 1:
        raise ValueError("nonlinearity degree p must be >= 1")
    I0 = tuple(float(x) for x in I0)
    if len(I0) != problem.b:
        raise ValueError("need one amplitude per tangential site")
    lo, hi = 2 * r * r, 4 * r * r
    for a in I0:
        if not (lo < a < hi):
            raise ValueError(f"amplitude {a} outside the window "
                             f"({lo}, {hi})")
    if grid.b != problem.b:
        raise ValueError("grid must have one axis per tangential site")
    for s in trunc.normal_sites:
        if len(s) != problem.d:
            raise ValueError(f"normal site {s} has wrong dimension")
        if not problem.is_normal_site(s):
            raise ValueError(f"{s} is a tangential site")

    tangential = {s: j for j, s in enumerate(problem.sites)}
    support = list(problem.sites) + list(trunc.normal_sites)
    dmax = trunc.degree_max
    b = problem.b

    # ordered 2p-tuples (m_1 .. m_2p) with alternating-sign momentum zero;
    # odd positions carry u, even positions carry conj(u)
    raw: dict[tuple, complex] = {}
    for head in itertools.product(support, repeat=2 * p - 1):
        last = [0] * problem.d
        for i, m in enumerate(head):
            sgn = 1 if i % 2 == 0 else -1
            for j in range(problem.d):
                last[j] += sgn * m[j]
        last = tuple(last)
        if last not in set(support):
            continue
        tup = head + (last,)
        k = [0] * b
        cpow = [0] * b
        alpha: dict = {}
        beta: dict = {}
        for i, m in enumerate(tup):
            conjugated = i % 2 == 1
            if m in tangential:
                j = tangential[m]
                k[j] += -1 if conjugated else 1
                cpow[j] += 1
            else:
                tgt = beta if conjugated else alpha
                tgt[m] = tgt.get(m, 0) + 1
        base_deg = sum(alpha.values()) + sum(beta.values())
        if base_deg > dmax:
            continue
        # Taylor of prod_j (I0_j + I_j)^(c_j/2) in I, degree-capped
        budget = (dmax - base_deg) // 2
        ranges = [range(0, budget + 1) for _ in range(b)]
        for ts in itertools.product(*ranges):
            if sum(ts) > budget:
                continue
            coeff = float(strength)
            for j in range(b):
                half = Fraction(cpow[j], 2)
                coeff *= float(_binom_frac(half, ts[j]))
                coeff *= I0[j] ** (float(half) - ts[j])
            if coeff == 0.0:
                continue
            m = Mono(k=tuple(k), l=tuple(ts), alpha=dict(alpha),
                     beta=dict(beta))
            raw[m] = raw.get(m, 0.0) + coeff

    const = 0.0
    terms = []
    for m, c in raw.items():
        if m.degree == 0 and m.knorm == 0:
            const += c
            continue
        terms.append((m, c))
    P = series(terms, grid=grid, momentum_flag=True, mode="float",
               problem=problem)

    pts = grid.points()
    omega = tuple(tuple(_norm_sq(s) + float(xi[j])
                        for j, s in enumerate(problem.sites))
                  for xi in pts)
    e = tuple(sum(w * a for w, a in zip(omega[g], I0)) + const
              for g in range(grid.size))
    # the twist of xi -> omega is the identity, so the measure constant
    # is exactly 1
    M = 1.0
    base = tuple(_norm_sq(s) for s in problem.sites)

    def omega_fn(xi):
        return tuple(bb + float(x) for bb, x in zip(base, xi))

    nf = NormalForm(e=e, omega=omega, omega_tilde={}, grid=grid, M=M, L=0.0,
                    omega_fn=omega_fn)
    return nf, P


# -- Melnikov conditions ---------------------------------------------------------


@dataclass(frozen=True)
class MelnikovRecord:
    kind: str
    k: tuple
    data: tuple
    value: float
    threshold: float
    passed: bool
    note: str = ""

    @property
    def margin(self) -> float:
        return self.value - self.threshold

    def as_dict(self) -> dict:
        return {"kind": self.kind, "k": list(self.k), "data": repr(self.data),
                "value": self.value, "threshold": self.threshold,
                "margin": self.margin, "passed": self.passed,
                "note": self.note}


@dataclass
class MelnikovReport:
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def overall(self) -> bool:
        return all(rec.passed for rec in self.records)

    def failures(self) -> list:
        return [rec for rec in self.records if not rec.passed]

    def counts(self) -> dict:
        out: dict = {}
        for rec in self.records:
            out[rec.kind] = out.get(rec.kind, 0) + 1
        return out


def _k_ball(b: int, bound: int, strict: bool = True) -> list:
    """All k in Z^b with |k|_1 < bound (or <= bound when strict=False)."""
    cap = bound - 1 if strict else bound
    out = []
    for k in itertools.product(range(-cap, cap + 1), repeat=b):
        if sum(abs(x) for x in k) <= cap:
            out.append(k)
    return out


def _primitive_line_families(N: int, pmax: int, problem: Problem) -> list:
    """Deduplicated codimension-one families (v, p), 0 <= p <= pmax.

    (v, p) and (-v, -p) describe the same hyperplane, so p is
    normalized nonnegative; non-primitive rows reduce to their
    primitive form or are dropped when the plane misses the lattice.
    """
    seen = set()
    out = []
    for v in ball_vectors(N, problem):
        for pval in range(0, pmax + 1):
            g = math.gcd(*[abs(x) for x in v])
            if g == 0:
                continue
            if pval % g:
                continue  # no integer points on this plane
            vv = tuple(x // g for x in v)
            pp = pval // g
            if pp == 0 and signlex_key(tuple(-x for x in vv)) < signlex_key(vv):
                vv = tuple(-x for x in vv)
            key = (vv, pp)
            if key in seen:
                continue
            seen.add(key)
            out.append(key)
    out.sort(key=lambda t: (signlex_key(t[0]), t[1]))
    return out


def enumerate_subspaces(N: int, problem: Problem, lp: LatticeParams,
                        max_subspaces: int = 20000,
                        warnings: Optional[list] = None) -> list:
    """Candidate affine subspaces [v_i; p_i]_ell, 1 <= ell < d,
    |p_ell| < c N^(tau1/4d)."""
    pmax_f = float(lp.c) * N ** float(Fraction(lp.tau1, 4 * problem.d))
    pmax = max(0, math.ceil(pmax_f) - 1)
    lines = _primitive_line_families(N, pmax, problem)
    subs = []
    truncated = False
    for v, pval in lines:
        if len(subs) >= max_subspaces:
            truncated = True
            break
        subs.append(Presentation(rows=((v, pval),)))
    for ell in range(2, problem.d):
        if truncated:
            break
        for rows in itertools.combinations(lines, ell):
            if any(rows[i][1] > rows[i + 1][1] for i in range(ell - 1)):
                continue
            sc = SpanChecker(problem.d)
            if not all(sc.add(v) for v, _ in rows):
                continue
            if len(subs) >= max_subspaces:
                truncated = True
                break
            subs.append(Presentation(rows=rows))
    if truncated and warnings is not None:
        warnings.append(f"subspace enumeration truncated at "
                        f"{max_subspaces} (N={N})")
    return subs


def good_point_table(K: int, N_list: Sequence[int], problem: Problem,
                     lp: LatticeParams, good_bound: int = 512,
                     good_radius=None, max_subspaces: int = 20000,
                     warnings: Optional[list] = None) -> list:
    """(N, subspace, good point) triples for condition (iv).

    Subspaces whose good portion meets no lattice point inside the
    search ball are skipped with a warning; the infinite-lattice theory
    guarantees nonemptiness only without the bound.
    """
    warnings = warnings if warnings is not None else []
    cap = 2.0 * K ** float(Fraction(lp.tau1) / Fraction(lp.tau0))
    out = []
    for N in sorted(set(int(N) for N in N_list)):
        if N < K or N > cap:
            warnings.append(f"N={N} outside [K, 2K^(tau1/tau0)]; skipped")
            continue
        for A in enumerate_subspaces(N, problem, lp, max_subspaces, warnings):
            mg = choose_good_point(A, N, good_bound, problem, lp,
                                   radius=good_radius)
            if mg is None:
                warnings.append(
                    f"no good point for {A.label()} at N={N} within "
                    f"|x| <= {good_bound}")
                continue
            out.append((N, A, tuple(mg)))
    return out


def melnikov_check(nf: NormalForm, xi_index: int, K: int, gamma: float,
                   problem: Problem, lp: LatticeParams,
                   N_list: Optional[Sequence[int]] = None,
                   good_bound: int = 512, good_radius=None,
                   max_subspaces: int = 20000,
                   good_points: Optional[list] = None) -> MelnikovReport:
    """Non-resonance report at one parameter grid point.

    Families: (i) |<omega,k> + h| against 2 gamma K^-tau0; (ii) the
    momentum-forced single normal mode against the same bar; (iii) pairs
    of normal modes against 2 gamma K^(-2 d tau1), with the difference
    family reduced exactly to a divisibility test on <pi(k), m>;
    (iv) good-point representatives of the affine subspaces against
    2 gamma min(N^(-2 d tau0), 2^-4d |p_ell|^-2d).
    """
    report = MelnikovReport()
    om = nf.omega_at(xi_index)
    d = problem.d
    b = problem.b
    om_inf = max(abs(w) for w in om)
    tau0 = float(lp.tau0)
    tau1 = float(lp.tau1)
    thr1 = 2.0 * gamma * K ** (-tau0)
    thr3 = 2.0 * gamma * K ** (-2.0 * d * tau1)
    kball = _k_ball(b, K, strict=True)

    # (i): the Fourier-integer family.  Only the integer closest to
    # -<omega,k> can possibly fail (every other shift clears by at
    # least 1/2 > threshold), so one record per k covers all |h| <=
    # 2|omega|K.
    hmax = math.ceil(2.0 * om_inf * K)
    for k in kball:
        wk = sum(ki * wi for ki, wi in zip(k, om))
        h = -round(wk)
        if h == 0 and not any(k):
            val = min(abs(wk + 1.0), abs(wk - 1.0))
            h = 1 if abs(wk + 1.0) <= abs(wk - 1.0) else -1
        else:
            val = abs(wk + h)
        if abs(h) > hmax:
            h = hmax if h > 0 else -hmax
            val = abs(wk + h)
        report.records.append(MelnikovRecord(
            kind="i", k=k, data=(h,), value=val, threshold=thr1,
            passed=val > thr1,
            note=f"minimum over |h| <= {hmax}"))

    # (ii): l = +-e_m with m forced by momentum
    for k in kball:
        pk = momentum_k(k, problem)
        wk = sum(ki * wi for ki, wi in zip(k, om))
        for sgn in (1, -1):
            m = tuple(-sgn * x for x in pk)
            if not any(m) or not problem.is_normal_site(m):
                continue
            val = abs(wk + sgn * nf.Omega(m, xi_index))
            report.records.append(MelnikovRecord(
                kind="ii", k=k, data=(sgn, m), value=val, threshold=thr1,
                passed=val > thr1))

    # (iii) sum family: l = e_m + e_n, n = -m - pi(k); the opposite sign
    # is covered by k -> -k since the k ball is symmetric
    sum_cap = 2.0 * om_inf * K
    rad = math.isqrt(max(0, math.floor(sum_cap)))
    small = [m for m in itertools.product(range(-rad, rad + 1), repeat=d)
             if _norm_sq(m) <= sum_cap]
    for k in kball:
        pk = momentum_k(k, problem)
        wk = sum(ki * wi for ki, wi in zip(k, om))
        for m in small:
            n = tuple(-x - y for x, y in zip(m, pk))
            if _norm_sq(m) + _norm_sq(n) >= sum_cap:
                continue
            if signlex_key(m) > signlex_key(n):
                continue
            if not problem.is_normal_site(m) or not problem.is_normal_site(n):
                continue
            val = abs(wk + nf.Omega(m, xi_index) + nf.Omega(n, xi_index))
            report.records.append(MelnikovRecord(
                kind="iii", k=k, data=("sum", m, n), value=val,
                threshold=thr3, passed=val > thr3))

    # (iii) difference family: l = e_m - e_n, n = m + pi(k).  Away from
    # the omega_tilde support the value is |wk - |pi(k)|^2 - 2 t| with
    # t = <pi(k), m> ranging over the multiples of gcd(pi(k)); the
    # nearest achievable multiple gives the exact infimum.
    tilde_sites = set(nf.omega_tilde)
    diff_bound = 8.0 * K ** tau1
    for k in kball:
        pk = momentum_k(k, problem)
        if not any(pk):
            continue
        wk = sum(ki * wi for ki, wi in zip(k, om))
        c = wk - _norm_sq(pk)
        excep = set(tilde_sites)
        excep |= {tuple(x - y for x, y in zip(s, pk)) for s in tilde_sites}
        for m in sorted(excep, key=signlex_key):
            n = tuple(x + y for x, y in zip(m, pk))
            if m == n or not problem.is_normal_site(m) \
                    or not problem.is_normal_site(n):
                continue
            if max(_norm_sq(m), _norm_sq(n)) > diff_bound ** 2:
                continue
            val = abs(wk + nf.Omega(m, xi_index) - nf.Omega(n, xi_index))
            report.records.append(MelnikovRecord(
                kind="iii", k=k, data=("diff", m, n), value=val,
                threshold=thr3, passed=val > thr3))
        g = math.gcd(*[abs(x) for x in pk])
        step = 2 * g
        t_best = step * round(c / step)
        val = abs(c - t_best)
        witness = None
        if val <= thr3:
            witness = _diff_witness(pk, t_best // 2, excep, problem)
        note = (f"generic sites: inf over t in {g}Z of |c - 2t|"
                + ("" if witness is None else f"; witness m={witness}"))
        report.records.append(MelnikovRecord(
            kind="iii", k=k, data=("diff-generic", g), value=val,
            threshold=thr3, passed=val > thr3 or witness is None, note=note))

    # (iv): good-point representatives over the supplied N window
    if good_points is None:
        if N_list is None:
            N_list = sorted({K, K + 1, 2 * K})
        good_points = good_point_table(K, N_list, problem, lp,
                                       good_bound=good_bound,
                                       good_radius=good_radius,
                                       max_subspaces=max_subspaces,
                                       warnings=report.warnings)
    kball_iv = _k_ball(b, K, strict=False)
    aggregate = len(good_points) * len(kball_iv) > 50000
    for N, A, mg in good_points:
        p_ell = A.pvec[-1]
        thr_n = N ** (-2.0 * d * tau0)
        thr_p = (math.inf if p_ell == 0
                 else 2.0 ** (-4 * d) * abs(p_ell) ** (-2 * d))
        thr4 = 2.0 * gamma * min(thr_n, thr_p)
        worst = None
        for k in kball_iv:
            if not any(k):
                continue
            pk = momentum_k(k, problem)
            ng = tuple(x + y for x, y in zip(mg, pk))
            if not problem.is_normal_site(ng):
                report.warnings.append(
                    f"n^g = {ng} tangential for {A.label()}, k={k}; skipped")
                continue
            wk = sum(ki * wi for ki, wi in zip(k, om))
            val = abs(wk + nf.Omega(mg, xi_index) - nf.Omega(ng, xi_index))
            if aggregate:
                if worst is None or val < worst.value:
                    worst = MelnikovRecord(
                        kind="iv", k=k, data=(N, A.label(), mg, ng),
                        value=val, threshold=thr4, passed=val > thr4,
                        note=f"p_ell={p_ell}; minimum over 0 < |k| <= {K}")
            else:
                report.records.append(MelnikovRecord(
                    kind="iv", k=k, data=(N, A.label(), mg, ng), value=val,
                    threshold=thr4, passed=val > thr4,
                    note=f"p_ell={p_ell}"))
        if aggregate and worst is not None:
            report.records.append(worst)
    return report


def _diff_witness(pk: Site, t: int, excluded: set, problem: Problem):
    """A normal site m with <pk, m> = t realizing a near-resonance, or
    None when t is not divisible by gcd(pk)."""
    x0 = solve_integer([list(pk)], [t])
    if x0 is None:
        return None
    dirs = integer_kernel([list(pk)])
    x0 = tuple(x0)
    cands = [x0]
    for u in dirs:
        for c in range(1, 6):
            cands.append(tuple(a + c * bb for a, bb in zip(x0, u)))
            cands.append(tuple(a - c * bb for a, bb in zip(x0, u)))
    for m in cands:
        n = tuple(a + bb for a, bb in zip(m, pk))
        if m in excluded or m == n:
            continue
        if problem.is_normal_site(m) and problem.is_normal_site(n):
            return m
    return None


# -- measure estimates -----------------------------------------------------------


def _as_l(l) -> tuple:
    if isinstance(l, Mapping):
        items = [(tuple(int(x) for x in s), int(v)) for s, v in l.items()]
    else:
        items = [(tuple(int(x) for x in s), int(v)) for s, v in l]
    items = [(s, v) for s, v in items if v != 0]
    items.sort(key=lambda t: t[0])
    if sum(abs(v) for _, v in items) > 2:
        raise ValueError("|l| must be at most 2")
    return tuple(items)


def resonant_measure(nf: NormalForm, k: Sequence[int], l, rho_exp: float,
                     gamma: float, K: int, samples: int = 20000,
                     seed: int = 2026,
                     report: Optional[dict] = None) -> tuple:
    """Monte-Carlo measure of the resonant parameter set, with the
    a-priori bound 2 M^-1 D^(b-1) gamma K^-rho.

    For l = 0 the condition is |<omega,k> + h| < gamma K^-rho over the
    integer shifts h, matching the Fourier-integer family; otherwise
    the shift is absent.  With an affine frequency map the sampler
    draws xi uniformly from the box, else it falls back to the grid
    fraction.
    """
    k = tuple(int(x) for x in k)
    litems = _as_l(l)
    if not any(k) and not litems:
        raise ValueError("(k, l) must not vanish")
    width = gamma * K ** (-float(rho_exp))
    grid = nf.grid
    if grid.size == 0:
        raise ValueError("empty parameter grid")
    box = [(float(lo), float(hi)) for lo, hi in grid.box]
    volume = 1.0
    for lo, hi in box:
        volume *= (hi - lo)

    def resonant(omega_vec, tilde_idx) -> bool:
        val = sum(ki * wi for ki, wi in zip(k, omega_vec))
        for site, mult in litems:
            val += mult * nf.Omega(site, tilde_idx)
        if litems:
            return abs(val) < width
        return abs(val - round(val)) < width

    method = "grid"
    if nf.omega_fn is not None and volume > 0:
        method = "monte-carlo"
        rng = Random(seed)
        hits = 0
        pts = grid.points()

        def nearest_grid(xi):
            best, best_d = 0, math.inf
            for gidx, pt in enumerate(pts):
                dd = sum((a - float(bb)) ** 2 for a, bb in zip(xi, pt))
                if dd < best_d:
                    best, best_d = gidx, dd
            return best

        need_tilde = bool(litems) and bool(nf.omega_tilde)
        for _ in range(samples):
            xi = tuple(rng.uniform(lo, hi) for lo, hi in box)
            gi = nearest_grid(xi) if need_tilde else 0
            if resonant(nf.omega_fn(xi), gi):
                hits += 1
        estimate = hits / samples * volume
        stderr = volume * math.sqrt(max(hits, 1)) / samples
    else:
        hits = sum(1 for g in range(grid.size)
                   if resonant(nf.omega_at(g), g))
        estimate = hits / grid.size * volume
        stderr = None

    D = max(hi - lo for lo, hi in box)
    bound = 2.0 / nf.M * D ** (nf.b - 1) * width
    if report is not None:
        report.update({"method": method, "width": width, "hits": hits,
                       "volume": volume, "stderr": stderr,
                       "samples": samples if method == "monte-carlo"
                       else grid.size})
    return estimate, bound


def exact_resonant_measure(lo: float, hi: float, slope: float,
                           intercept: float, width: float,
                           integer_shift: bool = True) -> float:
    """Length of {xi in [lo, hi] : |slope xi + intercept + h| < width}.

    h ranges over the integers when integer_shift is set, else h = 0.
    Exact interval arithmetic; the oracle for the one-parameter
    Monte-Carlo tests.
    """
    if hi < lo:
        raise ValueError("interval out of order")
    if slope == 0:
        base = abs(intercept - round(intercept)) if integer_shift \
            else abs(intercept)
        return (hi - lo) if base < width else 0.0
    half = width / abs(slope)
    vals = sorted([slope * lo + intercept, slope * hi + intercept])
    if integer_shift:
        hs = range(math.floor(-vals[1] - width) - 1,
                   math.ceil(-vals[0] + width) + 2)
    else:
        hs = [0]
    intervals = []
    for h in hs:
        center = (-h - intercept) / slope
        a, bb = max(lo, center - half), min(hi, center + half)
        if a < bb:
            intervals.append((a, bb))
    intervals.sort()
    total = 0.0
    cur = None
    for a, bb in intervals:
        if cur is None or a > cur[1]:
            if cur is not None:
                total += cur[1] - cur[0]
            cur = [a, bb]
        else:
            cur[1] = max(cur[1], bb)
    if cur is not None:
        total += cur[1] - cur[0]
    return total


def excluded_measure(nf: NormalForm, K: int, gamma: float, grid: XiGrid,
                     problem: Problem, lp: LatticeParams, C: float = 1.0,
                     report: Optional[dict] = None,
                     **mel_kwargs) -> tuple:
    """Fraction of grid points failing any Melnikov family, against
    C gamma K^(-tau0 + b + d/2)."""
    if grid != nf.grid:
        raise ValueError("grid must match the normal form's grid")
    if "good_points" not in mel_kwargs:
        mel_kwargs["good_points"] = good_point_table(
            K, mel_kwargs.pop("N_list", None) or sorted({K, K + 1, 2 * K}),
            problem, lp,
            good_bound=mel_kwargs.pop("good_bound", 512),
            good_radius=mel_kwargs.pop("good_radius", None),
            max_subspaces=mel_kwargs.pop("max_subspaces", 20000))
    failures = []
    for g in range(grid.size):
        rep = melnikov_check(nf, g, K, gamma, problem, lp, **mel_kwargs)
        if not rep.overall:
            failures.append(g)
    fraction = len(failures) / grid.size
    expo = -float(lp.tau0) + nf.b + problem.d / 2.0
    bound = C * gamma * K ** expo
    if report is not None:
        report.update({"failing_points": failures, "constant": C,
                       "exponent": expo, "grid_size": grid.size})
    return fraction, bound


# -- resonant part and homological equation -----------------------------------------


def _is_avg_mono(m: Mono) -> bool:
    if m.knorm:
        return False
    if sum(m.l) == 1 and not m.alpha and not m.beta:
        return True
    if not any(m.l) and m.alpha == m.beta and len(m.alpha) <= 1:
        return True
    return False


def extract_R(P: Series) -> tuple[Series, Series]:
    """Low-degree part R (2|l|+|alpha|+|beta| <= 2) and its average:
    the k = 0 action-linear, diagonal-quadratic and constant terms."""
    R = project(P, pred_degree_le(2))
    Ravg = project(R, _is_avg_mono)
    return R, Ravg


@dataclass
class HomologicalSolution:
    F: Series
    residual: Series
    residual_max: float
    min_denominator: float
    threshold: float


def _denominator_floor(gamma: float, K: int, d: int,
                       lp: LatticeParams) -> float:
    ln = math.log(gamma) - 2.0 * d * float(lp.tau1) * math.log(K)
    return math.exp(ln) if ln > -700 else 0.0


def solve_homological(nf: NormalForm, R: Series, K: int, gamma: float,
                      xi_index, problem: Problem,
                      lp: LatticeParams) -> HomologicalSolution:
    """F with {N, F} = Pi_<=K R - <R>, by eigenvalue division.

    xi_index may be a single grid index, a sequence of them, or None
    for every point; unsolved points keep zero coefficients.  Any
    denominator under gamma K^(-2 d tau1) is a Melnikov violation and
    raises.
    """
    if xi_index is None:
        slots = tuple(range(nf.grid.size))
    elif isinstance(xi_index, int):
        slots = (xi_index,)
    else:
        slots = tuple(int(g) for g in xi_index)
    Rlow, Ravg = extract_R(R)
    target = series_sub(project(Rlow, pred_k_le(K)), Ravg)
    threshold = _denominator_floor(gamma, K, problem.d, lp)
    min_den = math.inf
    out = {}
    slot_set = set(slots)
    for m, vals in target.terms.items():
        new = []
        for g, v in enumerate(vals):
            if g not in slot_set or v == 0:
                new.append(0j)
                continue
            lam = nf.eigenvalue(m, g)
            if abs(lam) < threshold:
                raise KamError(
                    f"denominator {lam} below the Melnikov floor "
                    f"{threshold} for {m} at grid point {g}")
            min_den = min(min_den, abs(lam))
            new.append(v / (1j * lam))
        out[m] = tuple(new)
    F = target.with_terms({m: v for m, v in out.items()
                           if any(x != 0 for x in v)})
    masked = target.map_coeffs(
        lambda m, vals: tuple(v if g in slot_set else 0j
                              for g, v in enumerate(vals)))
    residual = series_sub(nf_bracket(nf, F), masked)
    res_max = max((max(abs(x) for x in v)
                   for v in residual.terms.values()), default=0.0)
    return HomologicalSolution(F=F, residual=residual, residual_max=res_max,
                               min_denominator=min_den, threshold=threshold)


# -- schedule --------------------------------------------------------------------


@dataclass
class ScheduleRow:
    index: int
    s: float
    r: float
    K: int
    theta: float
    mu: float
    M: float
    L: float
    log_eps_pred: Optional[float]
    eps_measured: Optional[float] = None


@dataclass
class Schedule:
    """The iteration sequences, driven by measured step sizes.

    The predicted size ln eps_(v+1) = ln c - 2 ln gamma
    + (3 tau1^2 / tau0) ln K_v + (4/3) ln eps_v is recorded alongside;
    at desk scales it diverges (the K power dwarfs everything), so the
    radius, analyticity-width and K updates use the measured norm.
    """

    s0: float
    r0: float
    eps0: float
    K0: int
    theta0: float
    mu0: float
    gamma: float
    chi: float
    lp: LatticeParams
    d: int
    M0: float = 1.0
    L0: float = 0.0
    c_eps: float = 1.0
    c_K: float = 0.125
    kmax: int = 16
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if not (1.0 < self.chi < 4.0 / 3.0):
            raise ValueError("chi must lie in (1, 4/3)")
        drift = 1.0 / (self.chi - 1.0)
        if self.mu0 - drift <= 0 or self.theta0 + drift >= 4.0:
            msg = (f"total theta/mu drift {drift:.4f} exhausts the "
                   f"(theta, mu) gap from ({self.theta0}, {self.mu0})")
            if self.lp.mode == "paper":
                raise ValueError(msg)
            self.warnings.append(msg)
        if not self.rows:
            self.rows.append(ScheduleRow(
                index=0, s=self.s0, r=self.r0, K=self.K0, theta=self.theta0,
                mu=self.mu0, M=self.M0, L=self.L0,
                log_eps_pred=math.log(self.eps0) if self.eps0 > 0 else None,
                eps_measured=self.eps0))

    def row(self, nu: int) -> ScheduleRow:
        return self.rows[nu]

    def s_at(self, nu: int) -> float:
        return self.s0 * (1.0 - sum(2.0 ** (-i) for i in range(2, nu + 2)))

    def next_domain(self, eps_current: float) -> tuple:
        """(r, s) of the next row, from the current row's measured
        size: r shrinks by eta/4 with eta = eps^(1/3)."""
        cur = self.rows[-1]
        eta = max(eps_current, 0.0) ** (1.0 / 3.0)
        return 0.25 * eta * cur.r, self.s_at(cur.index + 1)

    def advance(self, eps_current: float,
                eps_next: Optional[float] = None) -> ScheduleRow:
        """Append the next row.

        eps_current is the measured size of the current row's
        perturbation and drives the radius shrink and the M/L growth;
        eps_next, when already measured on the next domain, drives the
        Fourier cutoff via K = c_K (s - s_+)^-1 ln(1/eps_next).
        """
        cur = self.rows[-1]
        nu = cur.index
        self.rows[-1] = replace(cur, eps_measured=eps_current)
        cur = self.rows[-1]
        eps = max(eps_current, 0.0)
        r_next, s_next = self.next_domain(eps)
        expo = 3.0 * float(self.lp.tau1) ** 2 / float(self.lp.tau0)
        log_pred = None
        if eps > 0:
            log_pred = (math.log(self.c_eps) - 2.0 * math.log(self.gamma)
                        + expo * math.log(cur.K)
                        + (4.0 / 3.0) * math.log(eps))
        driver = eps_next if eps_next and eps_next > 0 else eps
        if driver > 0:
            k_raw = self.c_K / (cur.s - s_next) * math.log(1.0 / driver)
            K_next = max(1, min(self.kmax, math.ceil(k_raw)))
        else:
            K_next = cur.K
        drift = self.chi ** (-(nu + 1))
        nxt = ScheduleRow(
            index=nu + 1, s=s_next, r=r_next, K=K_next,
            theta=cur.theta + drift, mu=cur.mu - drift,
            M=cur.M + eps, L=cur.L + eps,
            log_eps_pred=log_pred, eps_measured=eps_next)
        self.rows.append(nxt)
        return nxt


# -- KAM state and step -----------------------------------------------------------


@dataclass(frozen=True)
class StepParams:
    r: float
    s: float
    K: int
    theta: float
    mu: float
    gamma: float
    eps: float


@dataclass
class KamState:
    nf: NormalForm
    P: Series
    params: StepParams
    step_index: int = 0
    surviving: tuple = ()

    def __post_init__(self):
        if not self.surviving:
            self.surviving = tuple(range(self.nf.grid.size))
        else:
            self.surviving = tuple(int(g) for g in self.surviving)

    @property
    def surviving_fraction(self) -> float:
        return len(self.surviving) / self.nf.grid.size


def initial_state(nf: NormalForm, P: Series, analysis: AnalysisParams,
                  theta: float = 0.6, mu: float = 3.9,
                  problem: Optional[Problem] = None,
                  lp: Optional[LatticeParams] = None) -> KamState:
    """State at step 0; with a lattice supplied, eps carries the
    quasi-Toeplitz surrogate (>= the plain vector-field norm)."""
    eps = 0.0
    if problem is not None:
        eps = vector_field_norm(P, analysis.r, analysis.s, analysis.rho,
                                problem)
        if lp is not None:
            try:
                eps = max(eps, quasi_toeplitz_norm(
                    P, analysis.K,
                    Fraction(theta).limit_denominator(10 ** 6),
                    Fraction(mu).limit_denominator(10 ** 6), None, None,
                    analysis.r, analysis.s, analysis.rho, problem, lp))
            except ValueError:
                pass
    return KamState(nf=nf, P=P, params=StepParams(
        r=analysis.r, s=analysis.s, K=analysis.K, theta=theta, mu=mu,
        gamma=analysis.gamma, eps=eps))


def _smallness_logs(gamma: float, K: int, lp: LatticeParams) -> float:
    expo = 3.0 * float(lp.tau1) ** 2 / float(lp.tau0)
    return 3.0 * (math.log(0.5) + 2.0 * math.log(gamma)
                  - expo * math.log(K))


def _lie_groups(F: Series, groups: Sequence[tuple], order: int,
                trunc) -> tuple[Series, float, float]:
    """sum over groups of sum_j w_j(group) ad_F^j(series).

    Each group is (series, weight(j) callable, start_j).  Returns the
    assembled series, the mass of the last included order, and the
    truncation-dropped mass.
    """
    total = None
    last_mass = 0.0
    dropped = 0.0
    for G, weight, start in groups:
        term = G
        for j in range(0, order + 1):
            if j >= start:
                w = weight(j)
                if w:
                    piece = series_scale(term, w)
                    total = piece if total is None else series_add(total,
                                                                   piece)
                    if j == order:
                        last_mass += sum(
                            max(abs(x) for x in v)
                            for v in piece.terms.values())
            if j == order:
                break
            term = poisson_bracket(F, term, trunc=trunc)
            dropped += term.dropped
            if term.is_zero():
                break
    if total is None:
        total = zero_series(F.grid, momentum_flag=F.momentum_flag,
                            trunc=trunc, mode=F.mode)
    return total, last_mass, dropped


def _mask_slots(new: Series, old: Series, keep: set) -> Series:
    """Surviving slots take the transformed values, the rest keep the
    old ones."""
    size = new.grid.size
    monos = set(new.terms) | set(old.terms)
    out = {}
    for m in monos:
        nv = new.terms.get(m)
        ov = old.terms.get(m)
        vals = tuple(
            (nv[g] if nv is not None else 0j) if g in keep
            else (ov[g] if ov is not None else 0j)
            for g in range(size))
        if any(x != 0 for x in vals):
            out[m] = vals
    return new.with_terms(out)


def kam_step(state: KamState, schedule: Schedule, problem: Problem,
             lp: LatticeParams, analysis: AnalysisParams,
             mel_opts: Optional[dict] = None,
             jobs: Optional[int] = None) -> tuple[KamState, dict]:
    """One transformation H -> H o phi_F^1.

    <R> is absorbed into the normal form (real parts; the imaginary
    residue rides along), F solves the homological equation on the
    surviving grid points, and the new perturbation is assembled from
    the exact-in-time integral of the flow: with ad = {F, .},

        P_+ = sum_(j>=1) ad^j<R> / (j+1)!
            + sum_(j>=1) ad^j(Pi_<=K R) j / (j+1)!
            + sum_(j>=0) ad^j(P - Pi_<=K R) / j!
            - sum_(j>=0) ad^j(residual) / (j+1)!

    which is the closed form of (1-t)- and t-weighted integration of
    the Lie expansion over [0, 1].  Failing grid points are dropped.
    """
    prm = state.params
    nu = state.step_index
    if schedule.rows[-1].index != nu:
        raise KamError(f"schedule is at row {schedule.rows[-1].index}, "
                       f"state at step {nu}")
    if prm.eps <= 0:
        raise KamError("perturbation size is zero; nothing to transform")
    report: dict = {"step": nu, "warnings": []}

    ln_small = _smallness_logs(prm.gamma, prm.K, lp)
    ln_eps = math.log(prm.eps) if prm.eps > 0 else -math.inf
    report["smallness"] = {"ln_eps": ln_eps, "ln_threshold": ln_small,
                           "satisfied": ln_eps < ln_small}
    if ln_eps >= ln_small:
        msg = (f"smallness violated: ln eps = {ln_eps:.3f} >= "
               f"{ln_small:.3f} = 3 ln(gamma^2 K^(-3 tau1^2/tau0) / 2)")
        if lp.mode == "paper":
            raise KamError(msg)
        report["warnings"].append(msg + " (desk mode proceeds)")

    mel_opts = dict(mel_opts or {})
    if "good_points" not in mel_opts:
        mel_opts["good_points"] = good_point_table(
            prm.K, mel_opts.pop("N_list", None) or [prm.K],
            problem, lp,
            good_bound=mel_opts.pop("good_bound", 512),
            good_radius=mel_opts.pop("good_radius", None),
            max_subspaces=mel_opts.pop("max_subspaces", 2000))

    def check(g: int):
        return g, melnikov_check(state.nf, g, prm.K, prm.gamma, problem,
                                 lp, **mel_opts)

    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(check, state.surviving))
    else:
        results = [check(g) for g in state.surviving]
    keep, dropped_pts = [], []
    for g, rep in sorted(results):
        (keep if rep.overall else dropped_pts).append(g)
    report["melnikov"] = {"kept": keep, "dropped": dropped_pts,
                          "warnings": sorted(set(
                              w for _, rep in results
                              for w in rep.warnings))}
    if not keep:
        raise KamError(f"step {nu}: every grid point failed the "
                       "Melnikov conditions")
    keep_set = set(keep)

    R, Ravg = extract_R(state.P)
    B = project(R, pred_k_le(prm.K))

    # reality of <R>: frequencies must stay real, the imaginary residue
    # returns to the perturbation
    imag_mass = 0.0
    real_terms, imag_terms = {}, {}
    for m, vals in Ravg.terms.items():
        re = tuple(complex(v.real, 0.0) for v in vals)
        im = tuple(complex(0.0, v.imag) for v in vals)
        imag_mass = max(imag_mass, max(abs(v.imag) for v in vals))
        if any(x != 0 for x in re):
            real_terms[m] = re
        if any(x != 0 for x in im):
            imag_terms[m] = im
    A = Ravg.with_terms(real_terms)
    Rim = Ravg.with_terms(imag_terms)
    scale0 = max((max(abs(x) for x in v) for v in Ravg.terms.values()),
                 default=0.0)
    if imag_mass > 1e-12 * max(1.0, scale0):
        report["warnings"].append(
            f"<R> imaginary residue {imag_mass:.3e} above tolerance; "
            "returned to the perturbation")
    report["ravg_imag_mass"] = imag_mass

    sol = solve_homological(state.nf, R, prm.K, prm.gamma, keep, problem, lp)
    F = sol.F
    report["homological"] = {"residual_max": sol.residual_max,
                             "min_denominator": sol.min_denominator,
                             "threshold": sol.threshold,
                             "terms": len(F.terms)}

    S = series_sub(state.P, B)
    trunc = (max(analysis.degree_max,
                 max((m.degree for m in state.P.terms), default=0)),
             analysis.kmax)

    def w_A(j):
        return 1.0 / math.factorial(j + 1) if j >= 1 else 0.0

    def w_B(j):
        return j / math.factorial(j + 1) if j >= 1 else 0.0

    def w_S(j):
        return 1.0 / math.factorial(j)

    def w_res(j):
        return -1.0 / math.factorial(j + 1)

    groups = [(A, w_A, 1), (B, w_B, 1), (S, w_S, 0)]
    if Rim.terms:
        groups.append((Rim, lambda j: 1.0 / math.factorial(j + 1), 0))
    if sol.residual.terms:
        groups.append((sol.residual, w_res, 0))
    P_new, lie_last, lie_dropped = _lie_groups(F, groups,
                                               analysis.lie_order, trunc)
    P_plus = _mask_slots(P_new, state.P, keep_set)
    report["lie"] = {"order": analysis.lie_order, "last_order_mass": lie_last,
                     "dropped_mass": lie_dropped}

    # frequency updates: exactly the k = 0 action-linear coefficients,
    # the diagonal quadratics move omega_tilde, the constant moves e
    nf = state.nf
    e_new = list(nf.e)
    omega_new = [list(row) for row in nf.omega]
    tilde_new = {s: list(v) for s, v in nf.omega_tilde.items()}
    shifts = {"omega": {}, "tilde": {}, "e": {}}
    for m, vals in A.terms.items():
        if m.degree == 0:
            for g in keep:
                e_new[g] += vals[g].real
                shifts["e"][g] = vals[g].real
        elif sum(m.l) == 1:
            j = m.l.index(1)
            for g in keep:
                omega_new[g][j] += vals[g].real
            shifts["omega"][j] = {g: vals[g].real for g in keep}
        else:
            site = m.alpha[0][0]
            row = tilde_new.setdefault(site, [0.0] * nf.grid.size)
            for g in keep:
                row[g] += vals[g].real
            shifts["tilde"][site] = {g: vals[g].real for g in keep}
    report["frequency_shifts"] = {
        "omega_max": max((abs(v) for js in shifts["omega"].values()
                          for v in js.values()), default=0.0),
        "tilde_max": max((abs(v) for js in shifts["tilde"].values()
                          for v in js.values()), default=0.0)}

    r_next, s_next = schedule.next_domain(prm.eps)
    eps_meas = vector_field_norm(P_plus, r_next, s_next, analysis.rho,
                                 problem)
    nxt = schedule.advance(prm.eps, eps_next=eps_meas)
    qt_report: dict = {}
    try:
        qt_val = quasi_toeplitz_norm(
            P_plus, nxt.K, Fraction(nxt.theta).limit_denominator(10 ** 6),
            Fraction(nxt.mu).limit_denominator(10 ** 6), None, None,
            nxt.r, nxt.s, analysis.rho, problem, lp, report=qt_report)
    except ValueError as exc:
        qt_val = eps_meas
        report["warnings"].append(f"quasi-Toeplitz norm unavailable: {exc}")
        qt_report = {"error": str(exc)}
    report["norms"] = {"vector_field": eps_meas, "quasi_toeplitz": qt_val,
                       "qt_base": qt_report.get("base_norm")}
    eps_plus = max(eps_meas, qt_val)

    # measured constants of the quadratic bound eps_+ <= C gamma^-2
    # K^E eps^(4/3), tracked for both exponent variants
    if eps_plus > 0:
        d = problem.d
        core = (math.log(eps_plus) + 2.0 * math.log(prm.gamma)
                - (4.0 / 3.0) * math.log(prm.eps))
        report["quadratic_constants"] = {
            "log_C_plain": core - 4.0 * d * float(lp.tau1) * math.log(prm.K),
            "plain_exponent": 4.0 * d * float(lp.tau1),
            "log_C_toeplitz": core - (3.0 * float(lp.tau1) ** 2
                                      / float(lp.tau0)) * math.log(prm.K),
            "toeplitz_exponent": 3.0 * float(lp.tau1) ** 2 / float(lp.tau0)}

    nf_plus = NormalForm(
        e=tuple(e_new), omega=tuple(tuple(row) for row in omega_new),
        omega_tilde={s: tuple(v) for s, v in tilde_new.items()},
        grid=nf.grid, M=nxt.M, L=nxt.L, omega_fn=None)

    window = project(project(P_plus, pred_degree_le(2)), pred_k_le(prm.K))
    win_res = series_sub(window, project(window, _is_avg_mono))
    report["resonant_window_mass"] = max(
        (max(abs(x) for x in v) for v in win_res.terms.values()),
        default=0.0)

    new_state = KamState(
        nf=nf_plus, P=P_plus,
        params=StepParams(r=nxt.r, s=nxt.s, K=nxt.K, theta=nxt.theta,
                          mu=nxt.mu, gamma=prm.gamma, eps=eps_plus),
        step_index=nu + 1, surviving=tuple(keep))
    report["eps"] = {"previous": prm.eps, "measured": eps_meas,
                     "carried": eps_plus,
                     "predicted_log": nxt.log_eps_pred}
    report["params_next"] = {"r": nxt.r, "s": nxt.s, "K": nxt.K,
                             "theta": nxt.theta, "mu": nxt.mu}
    report["generator"] = F
    return new_state, report


def iterate(state: KamState, schedule: Schedule, max_steps: int,
            problem: Problem, lp: LatticeParams, analysis: AnalysisParams,
            mel_opts: Optional[dict] = None,
            jobs: Optional[int] = None) -> tuple[list, dict]:
    """Run kam_step repeatedly; trajectory plus a convergence report."""
    states = [state]
    step_reports = []
    generators = []
    omega0 = state.nf.omega
    for _ in range(max_steps):
        if state.params.eps <= 0 or state.params.eps < 1e-300:
            break
        try:
            state, rep = kam_step(state, schedule, problem, lp, analysis,
                                  mel_opts=mel_opts, jobs=jobs)
        except KamError as exc:
            raise KamError(f"step {state.step_index} failed: {exc}") from exc
        states.append(state)
        generators.append(rep.pop("generator"))
        step_reports.append(rep)
    eps_seq = [st.params.eps for st in states]
    ratios = []
    for a, bb in zip(eps_seq, eps_seq[1:]):
        if 0 < a < 1 and 0 < bb < 1:
            ratios.append(math.log(bb) / math.log(a))
    drift = 0.0
    for g in states[-1].surviving:
        for j in range(state.nf.b):
            drift = max(drift,
                        abs(states[-1].nf.omega[g][j] - omega0[g][j]))
    report = {
        "eps_sequence": eps_seq,
        "log_ratios": ratios,
        "K_sequence": [st.params.K for st in states],
        "surviving_fraction": [st.surviving_fraction for st in states],
        "omega_drift": drift,
        "eps_total": sum(eps_seq[:-1]),
        "omega_final": states[-1].nf.omega,
        "steps": step_reports,
        "generators": generators,
    }
    return states, report


# -- quadratic-denominator audit -----------------------------------------------------


def denominator_bound_check(nf: NormalForm, k: Sequence[int], m: Site,
                            n: Site, cp: CutParams, problem: Problem,
                            lp: LatticeParams, gamma: float, K: int,
                            xi_index: int = 0) -> dict:
    """|<omega,k> + |pi(k)|^2 - 2<pi(k),m> + Qhat(A) - Qhat(B)| against
    the case-split floor: gamma K^(-2 d tau1 tau/tau0) when pi(k) lies
    in the span of the cut normals, else N^(g tau)/2."""
    k = tuple(int(x) for x in k)
    m = tuple(int(x) for x in m)
    n = tuple(int(x) for x in n)
    if sum(abs(x) for x in k) >= K:
        raise ValueError("need |k| < K")
    pk = momentum_k(k, problem)
    if tuple(a + bb for a, bb in zip(m, pk)) != n:
        raise ValueError("need n = m + pi(k)")
    cut_m = find_cut(m, cp, problem, lp)
    cut_n = find_cut(n, cp, problem, lp)
    if cut_m is None or cut_n is None or cut_m.ell != cut_n.ell \
            or cut_m.ell < 1:
        raise ValueError("m and n need cuts at a shared level >= 1")
    Q = series([(Mono(k=(0,) * nf.b, l=(0,) * nf.b, alpha={s: 1},
                      beta={s: 1}), vals)
                for s, vals in nf.omega_tilde.items()
                if any(vals)], grid=nf.grid, mode="float")
    qhat, _ = diagonal_decompose(Q, cp, problem, lp)
    def hat(sub):
        vals = qhat.get(sub)
        return vals[xi_index].real if vals is not None else 0.0
    om = nf.omega_at(xi_index)
    wk = sum(ki * wi for ki, wi in zip(k, om))
    value = abs(wk + _norm_sq(pk) - 2 * dot(pk, m)
                + hat(cut_m.subspace) - hat(cut_n.subspace))
    span = SpanChecker(problem.d)
    for v in cut_m.subspace.vectors:
        span.add(v)
    in_span = span.contains(pk)
    d = problem.d
    g = lp.gap_for(d)
    tau = float(cp.tau)
    if in_span:
        expo = 2.0 * d * float(lp.tau1) * tau / float(lp.tau0)
        bound = gamma * K ** (-expo)
        formula = f"gamma K^(-2 d tau1 tau / tau0) = gamma {K}^(-{expo})"
    else:
        bound = 0.5 * cp.N ** (g * tau)
        formula = f"N^(g tau)/2 with g = {g}"
    paper_bound = 0.5 * cp.N ** (4 * d * tau)
    return {"value": value, "bound": bound, "passed": value >= bound,
            "in_span": in_span, "ell": cut_m.ell,
            "subspace_m": cut_m.subspace.label(),
            "subspace_n": cut_n.subspace.label(),
            "formula": formula,
            "paper_gap_bound": None if in_span else paper_bound}


# -- flow consistency ------------------------------------------------------------


def series_eval(F: Series, I: Sequence[float], theta: Sequence[float],
                z: Mapping, zbar: Optional[Mapping] = None,
                xi_index: int = 0) -> complex:
    """Value of F at a phase-space point, at one grid point."""
    z = {tuple(s): complex(v) for s, v in z.items()}
    zbar = ({tuple(s): complex(v) for s, v in zbar.items()}
            if zbar is not None
            else {s: v.conjugate() for s, v in z.items()})
    total = 0j
    for m, vals in F.terms.items():
        c = vals[xi_index]
        if c == 0:
            continue
        phase = sum(ki * t for ki, t in zip(m.k, theta))
        term = c * cmath.exp(1j * phase)
        for j, lj in enumerate(m.l):
            term *= I[j] ** lj
        for s, ee in m.alpha:
            term *= z.get(s, 0j) ** ee
        for s, ee in m.beta:
            term *= zbar.get(s, 0j) ** ee
        total += term
    return total


def flow_check(F: Series, H: Series, I, theta, z, order: int = 3,
               steps: int = 400, xi_index: int = 0) -> dict:
    """Integrate the generating flow numerically and compare H at the
    endpoint with the Lie-series value; the coordinate equations are
    dI_j/dt = -F_theta_j, dtheta_j/dt = F_I_j, dz_n/dt = i F_zbar_n,
    dzbar_n/dt = -i F_z_n, matching exp(ad_F) with ad_F = {F, .}."""
    b = F.b
    sites = sorted({s for m in list(F.terms) + list(H.terms)
                    for s in m.sites()})
    dF_th = [series_dtheta(F, j) for j in range(b)]
    dF_I = [series_dI(F, j) for j in range(b)]
    dF_z = {s: series_dz(F, s, conjugated=False) for s in sites}
    dF_zb = {s: series_dz(F, s, conjugated=True) for s in sites}

    def rhs(state):
        Iv, th, zv, zbv = state
        ev = lambda G: series_eval(G, Iv, th, zv, zbar=zbv,
                                   xi_index=xi_index)
        dI = [-ev(dF_th[j]) for j in range(b)]
        dth = [ev(dF_I[j]) for j in range(b)]
        dz = {s: 1j * ev(dF_zb[s]) for s in sites}
        dzb = {s: -1j * ev(dF_z[s]) for s in sites}
        return dI, dth, dz, dzb

    Iv = [complex(x) for x in I]
    th = [complex(x) for x in theta]
    zv = {tuple(s): complex(v) for s, v in z.items()}
    for s in sites:
        zv.setdefault(s, 0j)
    zbv = {s: v.conjugate() for s, v in zv.items()}
    h = 1.0 / steps

    def add(state, deriv, w):
        Iv, th, zv, zbv = state
        dI, dth, dz, dzb = deriv
        # sites outside F's support are constants of the motion
        return ([a + w * bb for a, bb in zip(Iv, dI)],
                [a + w * bb for a, bb in zip(th, dth)],
                {s: zv[s] + w * dz.get(s, 0j) for s in zv},
                {s: zbv[s] + w * dzb.get(s, 0j) for s in zbv})

    state = (Iv, th, zv, zbv)
    for _ in range(steps):
        k1 = rhs(state)
        k2 = rhs(add(state, k1, h / 2))
        k3 = rhs(add(state, k2, h / 2))
        k4 = rhs(add(state, k3, h))
        state = add(add(add(add(state, k1, h / 6), k2, h / 3),
                        k3, h / 3), k4, h / 6)

    # actions and angles go complex when F is not conjugate-symmetric
    Iv, th, zv, zbv = state
    flow_val = series_eval(H, Iv, th, zv, zbar=zbv, xi_index=xi_index)
    lie, remainder = lie_transform(F, H, order)
    lie_val = series_eval(lie, [float(x) for x in I],
                          [float(x) for x in theta], z, xi_index=xi_index)
    return {"flow": flow_val, "lie": lie_val,
            "difference": abs(flow_val - lie_val), "remainder": remainder}
