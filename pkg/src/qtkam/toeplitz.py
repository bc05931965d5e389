"""Piecewise-constant structure of high-mode quadratic interactions.

A monomial that is quadratic in far-out normal modes, with the two high
sites sharing a cut level, is classified by the translation class of
its high pair: the coefficient of a fitted approximation may depend on
the high sites only through sigma*m + sigma'*n and the cut subspace.
The norm built here takes a finite grid of (N, tau) parameters and is
an upper-bound surrogate for a supremum over all admissible values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

from .lattice import Cut, Presentation, find_cut, signlex_key
from .params import CutParams, LatticeParams, Problem
from .series import (Mono, Series, SiteClassifier, Values, _vals_add,
                     _vals_is_zero, _vals_scale, coeff_c1, mono_momentum,
                     poisson_bracket, pred_k_ge, project, series_add,
                     series_scale, series_sub, split_bracket,
                     vector_field_norm)

Site = tuple[int, ...]


# -- site and monomial classification -----------------------------------------

def is_high_site(site: Site, theta: Fraction, N: int,
                 tau1: Fraction) -> bool:
    """Exact test of |site| > theta * N^tau1."""
    theta = Fraction(theta)
    t = Fraction(tau1)
    n2 = sum(x * x for x in site)
    q = t.denominator
    # |site|^2 > theta^2 N^(2 tau1)  <=>  n2^q > theta^(2q) N^(2p)
    return Fraction(n2) ** q > theta ** (2 * q) * Fraction(N) ** (2 * t.numerator)


def weighted_low_degree(alpha, beta) -> float:
    """sum over sites of |site| (alpha + beta), Euclidean site norms."""
    total = 0.0
    acc: dict[Site, int] = {}
    for site, exp in alpha:
        acc[site] = acc.get(site, 0) + exp
    for site, exp in beta:
        acc[site] = acc.get(site, 0) + exp
    for site, exp in acc.items():
        total += math.sqrt(sum(x * x for x in site)) * exp
    return total


def low_momentum_pred(N: int, mu: Fraction) -> Callable[[Mono], bool]:
    """Monomials with |k| < N and weighted normal-mode degree < mu N^3."""
    bound = float(mu) * N ** 3

    def pred(m: Mono) -> bool:
        return m.knorm < N and weighted_low_degree(m.alpha, m.beta) < bound

    return pred


@dataclass(frozen=True)
class BilinearTerm:
    """High-quadratic factorization of a monomial.

    The monomial factors as (low part) * z_m^sigma * z_n^sigma' where
    sigma = +1 stands for z and -1 for zbar, |m|, |n| exceed
    theta N^tau1, the low part has weighted degree below mu N^3, and m,
    n share a cut level; `cut` is the one of the two cuts whose
    subspace presentation is sign-lex smaller.
    """

    sigma: int
    sigma_prime: int
    m: Site
    n: Site
    cut: Cut
    low_alpha: tuple[tuple[Site, int], ...]
    low_beta: tuple[tuple[Site, int], ...]

    @property
    def h(self) -> Site:
        return tuple(self.sigma * x + self.sigma_prime * y
                     for x, y in zip(self.m, self.n))

    def class_key(self, mono: Mono):
        return (self.sigma, self.sigma_prime, self.h,
                self.cut.subspace.key(), mono.k, mono.l, self.low_alpha,
                self.low_beta)

    def pair_key(self):
        return signlex_key(self.m + self.n)


def classify_bilinear(m: Mono, cp: CutParams, problem: Problem,
                      lp: LatticeParams) -> Optional[BilinearTerm]:
    """The BilinearTerm of a monomial, or None if it does not qualify."""
    if m.knorm >= cp.N:
        return None
    high: list[tuple[Site, int]] = []
    low_a: list[tuple[Site, int]] = []
    low_b: list[tuple[Site, int]] = []
    for site, exp in m.alpha:
        if is_high_site(site, cp.theta, cp.N, lp.tau1):
            high.extend([(site, 1)] * exp)
        else:
            low_a.append((site, exp))
    for site, exp in m.beta:
        if is_high_site(site, cp.theta, cp.N, lp.tau1):
            high.extend([(site, -1)] * exp)
        else:
            low_b.append((site, exp))
    if len(high) != 2:
        return None
    if weighted_low_degree(low_a, low_b) >= float(cp.mu) * cp.N ** 3:
        return None
    # canonical factor order: sign-lex on site, z before zbar at a tie
    high.sort(key=lambda t: (signlex_key(t[0]), -t[1]))
    (site_m, sigma), (site_n, sigma_p) = high
    cut_m = find_cut(site_m, cp, problem, lp)
    if cut_m is None or cut_m.ell == 0:
        return None
    if site_n == site_m:
        cut_n = cut_m
    else:
        cut_n = find_cut(site_n, cp, problem, lp)
        if cut_n is None or cut_n.ell != cut_m.ell:
            return None
    chosen = cut_m
    if cut_n is not cut_m:
        if cut_n.subspace.key() < cut_m.subspace.key():
            chosen = cut_n
    return BilinearTerm(sigma=sigma, sigma_prime=sigma_p, m=site_m,
                        n=site_n, cut=chosen,
                        low_alpha=tuple(low_a), low_beta=tuple(low_b))


def _check_band_separation(N: int, lp: LatticeParams):
    # validates 4 N^3 < N^tau1 / 2 exactly
    SiteClassifier(N=N, tau1=lp.tau1)


def project_bilinear(F: Series, cp: CutParams, problem: Problem,
                     lp: LatticeParams) -> Series:
    """Projection onto the high-quadratic subspace for (N, theta, mu, tau).

    Keeps the monomials that factor as a low part times two high-site
    factors whose sites share a nonzero cut level.  Idempotent and
    contractive by construction.
    """
    _check_band_separation(cp.N, lp)
    kept = {}
    for m, vals in F.terms.items():
        bt = classify_bilinear(m, cp, problem, lp)
        if bt is None:
            continue
        pi = mono_momentum(m, problem)
        if any(pi):
            raise ValueError("bilinear projection needs a "
                             "momentum-conserving series")
        kept[m] = vals
    return F.with_terms(kept)


# -- piecewise-constant fit -----------------------------------------------------

@dataclass
class ToeplitzClass:
    """One translation class of high pairs with a common coefficient."""

    sigma: int
    sigma_prime: int
    h: Site
    subspace: Presentation
    k: tuple[int, ...]
    l: tuple[int, ...]
    low_alpha: tuple[tuple[Site, int], ...]
    low_beta: tuple[tuple[Site, int], ...]
    representative: tuple[Site, Site]
    coeff: Values
    members: list[tuple[Mono, tuple[Site, Site]]] = field(default_factory=list)


@dataclass
class PiecewiseToeplitz:
    """Coefficient table keyed by (signs, h, subspace, low data).

    Structurally independent of the high pair beyond sigma m + sigma' n
    and the cut subspace; re-read as a Series it is supported on the
    same monomials as the projection it was fitted to.
    """

    classes: dict[tuple, ToeplitzClass]

    def as_series(self, template: Series) -> Series:
        terms = {}
        for cls in self.classes.values():
            for mono_obj, _pair in cls.members:
                terms[mono_obj] = cls.coeff
        return template.with_terms(terms)


@dataclass
class QTDecomposition:
    """Split of a bilinear projection into class-constant and error parts.

    projection = toeplitz series + error_part / scale with
    scale = N^(gap * tau); error_part is stored pre-multiplied by scale.
    """

    cp: CutParams
    gap: int
    toeplitz_part: PiecewiseToeplitz
    error_part: Series
    projection: Series
    scale: object  # Fraction when gap*tau is an integer, else float

    def toeplitz_series(self) -> Series:
        return self.toeplitz_part.as_series(self.projection)

    def reconstruct(self) -> Series:
        if isinstance(self.scale, Fraction):
            inv = Fraction(1) / self.scale
            inv = inv if self.projection.mode == "exact" else float(inv)
        else:
            inv = 1.0 / self.scale
        return series_add(self.toeplitz_series(),
                          series_scale(self.error_part, inv))

    def export(self) -> dict:
        table = []
        for cls in self.toeplitz_part.classes.values():
            table.append({
                "sigma": cls.sigma, "sigma_prime": cls.sigma_prime,
                "h": list(cls.h),
                "subspace": cls.subspace.label(),
                "k": list(cls.k), "l": list(cls.l),
                "alpha": [[list(s), e] for s, e in cls.low_alpha],
                "beta": [[list(s), e] for s, e in cls.low_beta],
                "representative": [list(cls.representative[0]),
                                   list(cls.representative[1])],
                "coeff_abs": _vals_max_abs_float(cls.coeff),
                "members": len(cls.members),
            })
        return {"N": self.cp.N, "theta": str(self.cp.theta),
                "mu": str(self.cp.mu), "tau": str(self.cp.tau),
                "gap": self.gap, "scale": float(self.scale),
                "classes": table}


def _vals_max_abs_float(vals: Values) -> float:
    return max((abs(v) for v in vals), default=0.0)


def _fit_scale(N: int, tau: Fraction, gap: int, exact: bool):
    e = Fraction(tau) * gap
    if e.denominator == 1:
        s = Fraction(N) ** e.numerator
        return s if exact else float(s)
    return float(N) ** float(e)


def toeplitz_fit(F: Series, cp: CutParams, problem: Problem,
                 lp: LatticeParams) -> QTDecomposition:
    """Fit class-constant coefficients to the bilinear projection.

    Every occupied class gets the coefficient of its sign-lex minimal
    (m, n) pair; the error part is scale * (projection - fit).  This
    witnesses an upper bound for the best possible fit, it is not a
    minimiser.  Classes with a single member fit exactly.
    """
    proj = project_bilinear(F, cp, problem, lp)
    gap = lp.gap_for(problem.d)
    classes: dict[tuple, ToeplitzClass] = {}
    for m, vals in proj.terms.items():
        bt = classify_bilinear(m, cp, problem, lp)
        key = bt.class_key(m)
        entry = classes.get(key)
        if entry is None:
            entry = ToeplitzClass(sigma=bt.sigma,
                                  sigma_prime=bt.sigma_prime, h=bt.h,
                                  subspace=bt.cut.subspace, k=m.k, l=m.l,
                                  low_alpha=bt.low_alpha,
                                  low_beta=bt.low_beta,
                                  representative=(bt.m, bt.n),
                                  coeff=vals)
            classes[key] = entry
        elif bt.pair_key() < signlex_key(entry.representative[0]
                                         + entry.representative[1]):
            entry.representative = (bt.m, bt.n)
            entry.coeff = vals
        entry.members.append((m, (bt.m, bt.n)))
    pt = PiecewiseToeplitz(classes=classes)
    scale = _fit_scale(cp.N, cp.tau, gap, F.mode == "exact")
    resid = series_sub(proj, pt.as_series(proj))
    err = series_scale(resid, scale if F.mode == "exact"
                       else float(scale))
    return QTDecomposition(cp=cp, gap=gap, toeplitz_part=pt,
                           error_part=err, projection=proj, scale=scale)


# -- the finite-grid norm --------------------------------------------------------

def default_tau_grid(lp: LatticeParams, d: int) -> tuple[Fraction, ...]:
    top = Fraction(lp.tau1, 4 * d)
    mid = (Fraction(lp.tau0) + top) / 2
    grid = []
    for t in (Fraction(lp.tau0), mid, top):
        if t not in grid:
            grid.append(t)
    return tuple(grid)


def quasi_toeplitz_norm(F: Series, K: int, theta: Fraction, mu: Fraction,
                        N_list: Optional[Sequence[int]],
                        tau_list: Optional[Sequence[Fraction]],
                        r: float, s: float, rho: float, problem: Problem,
                        lp: LatticeParams,
                        report: Optional[dict] = None) -> float:
    """Finite-grid surrogate norm over (N, tau) choices.

    For each grid pair the value is max(|X_F|, |X_fit|, |X_error|); the
    result is the max over the grid.  Defaults: N in {K, K+1, 2K}, tau
    spanning [tau0, tau1/(4d)].  A series whose projections are already
    class-constant scores exactly |X_F|.
    """
    if N_list is None:
        N_list = sorted({K, K + 1, 2 * K})
    if tau_list is None:
        tau_list = default_tau_grid(lp, problem.d)
    N_list = [int(N) for N in N_list]
    tau_list = [Fraction(t) for t in tau_list]
    if not N_list or not tau_list:
        raise ValueError("N and tau grids must be nonempty")
    if any(N < K for N in N_list):
        raise ValueError("every N must be at least K")
    top = Fraction(lp.tau1, 4 * problem.d)
    if any(t < lp.tau0 or t > top for t in tau_list):
        raise ValueError("tau values must lie in [tau0, tau1/(4d)]")
    base = vector_field_norm(F, r, s, rho, problem)
    value = base
    largest_nonempty = None
    entries = []
    for N in N_list:
        for tau in tau_list:
            cp = CutParams(N=N, theta=theta, mu=mu, tau=tau)
            dec = toeplitz_fit(F, cp, problem, lp)
            if dec.projection.terms:
                largest_nonempty = max(largest_nonempty or N, N)
            nfit = vector_field_norm(dec.toeplitz_series(), r, s, rho,
                                     problem)
            nerr = vector_field_norm(dec.error_part, r, s, rho, problem)
            v = max(base, nfit, nerr)
            entries.append({"N": N, "tau": str(tau), "fit_norm": nfit,
                            "error_norm": nerr, "value": v,
                            "classes": len(dec.toeplitz_part.classes),
                            "projected_terms": len(dec.projection.terms)})
            value = max(value, v)
    if report is not None:
        report["value"] = value
        report["base_norm"] = base
        report["largest_nonempty_N"] = largest_nonempty
        report["grid"] = entries
        report["surrogate"] = True
    return value


# -- diagonal decomposition -------------------------------------------------------

def diagonal_decompose(Q: Series, cp: CutParams, problem: Problem,
                       lp: LatticeParams, qt_bound: Optional[float] = None
                       ) -> tuple[dict[Presentation, Values],
                                  dict[Site, Values]]:
    """Split a diagonal quadratic into class values plus scaled errors.

    Q must be sum_m Q_m z_m zbar_m.  For every site m in the bilinear
    region (nonzero cut, |m| above the high threshold) with cut
    subspace A: Q_m = Qhat[A] + Qbar[m] / scale exactly, where Qhat
    takes the value at the sign-lex least site of each class and
    scale = N^(gap tau).  Sites outside the region are left out of both
    maps.  With qt_bound given, |Q_m|, |Qhat|, |Qbar_m| <= 2 qt_bound is
    verified.
    """
    gap = lp.gap_for(problem.d)
    per_site: dict[Site, Values] = {}
    for m, vals in Q.terms.items():
        ad = m.alpha_dict()
        bd = m.beta_dict()
        diag = (not any(m.k) and not any(m.l) and len(ad) == 1
                and ad == bd and next(iter(ad.values())) == 1)
        if not diag:
            raise ValueError("diagonal decomposition needs a series of "
                             "z_m zbar_m terms only")
        per_site[next(iter(ad))] = vals
    groups: dict[Presentation, list[Site]] = {}
    for site in per_site:
        if not is_high_site(site, cp.theta, cp.N, lp.tau1):
            continue
        cut = find_cut(site, cp, problem, lp)
        if cut is None or cut.ell == 0:
            continue
        groups.setdefault(cut.subspace, []).append(site)
    scale = _fit_scale(cp.N, cp.tau, gap, Q.mode == "exact")
    qhat: dict[Presentation, Values] = {}
    qbar: dict[Site, Values] = {}
    for A, sites in groups.items():
        rep = min(sites, key=signlex_key)
        qhat[A] = per_site[rep]
        for site in sites:
            diff = _vals_add(per_site[site],
                             _vals_scale(qhat[A], -1))
            qbar[site] = _vals_scale(diff, scale if Q.mode == "exact"
                                     else float(scale))
    if qt_bound is not None:
        cap = 2.0 * qt_bound + 1e-12 * max(1.0, qt_bound)
        for site, vals in per_site.items():
            if coeff_c1(vals, Q.grid) > cap:
                raise ValueError(f"|Q_{site}| exceeds twice the norm bound")
        for A, vals in qhat.items():
            if coeff_c1(vals, Q.grid) > cap:
                raise ValueError("class value exceeds twice the norm bound")
        for site, vals in qbar.items():
            if coeff_c1(vals, Q.grid) > cap:
                raise ValueError(f"error value at {site} exceeds twice "
                                 "the norm bound")
    return qhat, qbar


# -- bracket splitting identity ------------------------------------------------------

def _frac_cmp_pow(coef: Fraction, N: int, expo: Fraction,
                  rhs: Fraction) -> bool:
    """Exact test of coef * N^expo >= rhs for nonnegative quantities."""
    e = Fraction(expo)
    q = e.denominator
    return coef ** q * Fraction(N) ** e.numerator >= rhs ** q


def splitting_preconditions(cp: CutParams, cpp: CutParams,
                            problem: Problem, lp: LatticeParams) -> list[str]:
    """Parameter relations needed for the bracket splitting identity.

    Returns a list of violated relations (empty when all hold).  The
    primed parameters cpp must tighten cp: same N and tau, larger
    theta, smaller mu.
    """
    bad = []
    if cpp.N != cp.N or cpp.tau != cp.tau:
        bad.append("primed parameters must share N and tau")
        return bad
    N = cp.N
    theta, mu = Fraction(cp.theta), Fraction(cp.mu)
    thetap, mup = Fraction(cpp.theta), Fraction(cpp.mu)
    if not (thetap > theta and mup < mu):
        bad.append("need theta' > theta and mu' < mu")
    if not Fraction(1, N * N) <= mu - mup:
        bad.append("need 1/N^2 <= mu - mu'")
    e = 4 * problem.d * Fraction(lp.tau0) - 4
    if e.denominator == 1:
        lhs = 2 * mup / Fraction(N) ** e.numerator
        if not lhs < thetap - theta:
            bad.append("need 2 mu' / N^(4 d tau0 - 4) < theta' - theta")
    else:
        if not 2 * float(mup) / float(N) ** float(e) < float(thetap - theta):
            bad.append("need 2 mu' / N^(4 d tau0 - 4) < theta' - theta")
    C1 = problem.C1
    if not C1 * N + mup * N ** 3 <= mu * N ** 3:
        bad.append("need C1 N + mu' N^3 <= mu N^3")
    if not _frac_cmp_pow(thetap - theta, N, Fraction(lp.tau1) - 3,
                         mup + Fraction(C1, N * N)):
        bad.append("need (theta' - theta) N^tau1 >= mu' N^3 + C1 N")
    if not _frac_cmp_pow(theta, N, Fraction(lp.tau1) - 3, 2 * mu):
        bad.append("need theta N^tau1 >= 2 mu N^3 (band disjointness)")
    if mu > 2:
        bad.append("need mu <= 2 so low-momentum sites are low band")
    # shifting a high site by a conserved low remainder must keep its
    # cut level: |shift| < C1 N + mu' N^3 and test vectors are < C1 N
    margin = C1 * N * (C1 * N + mup * N ** 3)
    g = lp.gap_for(problem.d)
    tau = Fraction(cp.tau)
    q = tau.denominator
    low_gap = (mu - mup) ** q * Fraction(N) ** tau.numerator
    high_gap = (thetap - theta) ** q * Fraction(N) ** (g * tau.numerator)
    if not low_gap >= margin ** q:
        bad.append("need (mu - mu') N^tau >= C1 N (C1 N + mu' N^3)")
    if not high_gap >= margin ** q:
        bad.append("need (theta' - theta) N^(g tau) >= "
                   "C1 N (C1 N + mu' N^3)")
    return bad


def splitting_check(f1: Series, f2: Series, cp: CutParams, cpp: CutParams,
                    trunc: Optional[tuple[int, int]], problem: Problem,
                    lp: LatticeParams) -> Series:
    """Residual of the bracket splitting identity; zero under the
    stated parameter relations.

    The tight projection (primed) of {f1, f2} is reassembled from the
    loose projection of the factors: the high-derivative part of
    bilinear x bilinear, the action-angle and low-derivative parts of
    bilinear x low-momentum both ways, and the high-frequency spill
    terms.  The two spill terms are made disjoint by restricting the
    second one to low-frequency first factors.
    """
    bad = splitting_preconditions(cp, cpp, problem, lp)
    if bad:
        raise ValueError("; ".join(bad))
    N = cp.N
    classifier = SiteClassifier(N=N, tau1=lp.tau1)

    def proj_loose(F):
        return project_bilinear(F, cp, problem, lp)

    def proj_tight(F):
        return project_bilinear(F, cpp, problem, lp)

    low2 = low_momentum_pred(N, 2 * Fraction(cp.mu))
    up = pred_k_ge(N)

    lhs = proj_tight(poisson_bracket(f1, f2, trunc=trunc))

    b1, b2 = proj_loose(f1), proj_loose(f2)
    l1, l2 = project(f1, low2), project(f2, low2)
    u1, u2 = project(f1, up), project(f2, up)
    f1_lowfreq = series_sub(f1, u1)

    pieces = [
        split_bracket(b1, b2, classifier, "H", trunc=trunc),
        split_bracket(b1, l2, classifier, "Itheta", trunc=trunc),
        split_bracket(b1, l2, classifier, "L", trunc=trunc),
        split_bracket(l1, b2, classifier, "Itheta", trunc=trunc),
        split_bracket(l1, b2, classifier, "L", trunc=trunc),
        poisson_bracket(u1, f2, trunc=trunc),
        poisson_bracket(f1_lowfreq, u2, trunc=trunc),
    ]
    rhs = pieces[0]
    for p in pieces[1:]:
        rhs = series_add(rhs, p)
    return series_sub(lhs, proj_tight(rhs))


# -- closure bounds ----------------------------------------------------------------

def bracket_closure_bound(T1: float, T2: float, r: float, s: float,
                          r2: float, s2: float, d: int) -> float:
    """Product bound C1 delta^-1 T1 T2 on the bracket's surrogate norm,
    with C1 = 2^(2d+1) and delta = (r2/r)^2 min(s - s2, 1 - r2/r)."""
    if not (0 < r2 < r and 0 <= s2 < s):
        raise ValueError("need 0 < r2 < r and 0 <= s2 < s")
    delta = (r2 / r) ** 2 * min(s - s2, 1 - r2 / r)
    return 2 ** (2 * d + 1) / delta * T1 * T2


def lie_closure_bound(T1: float, T2: float, r: float, s: float,
                      r2: float, s2: float, d: int) -> float:
    """Geometric-series bound (1 - C1 e delta^-1 T1)^-1 T2 for the flow;
    requires C1 e delta^-1 T1 < 1/2."""
    if not (0 < r2 < r and 0 <= s2 < s):
        raise ValueError("need 0 < r2 < r and 0 <= s2 < s")
    delta = (r2 / r) ** 2 * min(s - s2, 1 - r2 / r)
    x = 2 ** (2 * d + 1) * math.e / delta * T1
    if x >= 0.5:
        raise ValueError("flow bound needs C1 e delta^-1 T1 < 1/2")
    return T2 / (1.0 - x)
