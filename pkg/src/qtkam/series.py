"""Sparse Taylor-Fourier series over action-angle and elliptic variables.

A monomial is e^{i<k,theta>} I^l z^alpha zbar^beta with k, l indexed by
the b tangential sites and alpha, beta finitely supported on normal
sites.  Coefficients are sampled on a parameter grid; an exact mode
stores Gaussian rationals so algebraic identities can be tested for
literal zero.  The Poisson bracket sign convention is fixed so that the
quadratic normal form N = <omega, I> + sum Omega_n z_n zbar_n acts
diagonally with eigenvalue i(<k, omega> + Omega.(alpha - beta)).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from .lattice import signlex_key
from .params import Problem

Site = tuple[int, ...]


# -- exact complex scalars ---------------------------------------------------

class GaussRat:
    """Complex number with rational real and imaginary parts."""

    __slots__ = ("re", "im")

    def __init__(self, re=0, im=0):
        self.re = Fraction(re)
        self.im = Fraction(im)

    def __add__(self, other):
        other = _as_gauss(other)
        return GaussRat(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_gauss(other)
        return GaussRat(self.re - other.re, self.im - other.im)

    def __rsub__(self, other):
        return _as_gauss(other) - self

    def __mul__(self, other):
        other = _as_gauss(other)
        return GaussRat(self.re * other.re - self.im * other.im,
                        self.re * other.im + self.im * other.re)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_gauss(other)
        d = other.re * other.re + other.im * other.im
        if d == 0:
            raise ZeroDivisionError("division by zero GaussRat")
        return GaussRat((self.re * other.re + self.im * other.im) / d,
                        (self.im * other.re - self.re * other.im) / d)

    def __neg__(self):
        return GaussRat(-self.re, -self.im)

    def conjugate(self) -> "GaussRat":
        return GaussRat(self.re, -self.im)

    def __abs__(self) -> float:
        return math.hypot(float(self.re), float(self.im))

    def __eq__(self, other):
        if isinstance(other, GaussRat):
            return self.re == other.re and self.im == other.im
        if isinstance(other, (int, Fraction)):
            return self.im == 0 and self.re == other
        return NotImplemented

    def __hash__(self):
        return hash((self.re, self.im))

    def __repr__(self):
        return f"GaussRat({self.re}, {self.im})"

    def __complex__(self):
        return complex(float(self.re), float(self.im))


def _as_gauss(x) -> GaussRat:
    if isinstance(x, GaussRat):
        return x
    if isinstance(x, (int, Fraction)):
        return GaussRat(x, 0)
    raise TypeError(f"cannot mix {type(x).__name__} into exact coefficients")


# -- parameter grid ----------------------------------------------------------

@dataclass(frozen=True)
class XiGrid:
    """Product grid over a parameter box, one axis per tangential site.

    Derivatives are central differences on interior points, one-sided at
    the edges, zero on single-point axes.
    """

    box: tuple[tuple[Fraction, Fraction], ...]
    npts: int
    exact: bool = False

    def __post_init__(self):
        if self.npts < 1:
            raise ValueError("grid needs at least one point per axis")
        box = tuple((Fraction(lo), Fraction(hi)) for lo, hi in self.box)
        if any(hi < lo for lo, hi in box):
            raise ValueError("box bounds out of order")
        object.__setattr__(self, "box", box)

    @property
    def b(self) -> int:
        return len(self.box)

    @property
    def size(self) -> int:
        return self.npts ** self.b

    def axis(self, j: int) -> list:
        lo, hi = self.box[j]
        if self.npts == 1:
            vals = [(lo + hi) / 2]
        else:
            step = (hi - lo) / (self.npts - 1)
            vals = [lo + step * i for i in range(self.npts)]
        return vals if self.exact else [float(v) for v in vals]

    def step(self, j: int):
        lo, hi = self.box[j]
        if self.npts == 1:
            return None
        h = (hi - lo) / (self.npts - 1)
        return h if self.exact else float(h)

    def points(self) -> list[tuple]:
        return [tuple(pt) for pt in itertools.product(
            *[self.axis(j) for j in range(self.b)])]

    def index(self, multi: Sequence[int]) -> int:
        idx = 0
        for i in multi:
            idx = idx * self.npts + i
        return idx

    def multi(self, idx: int) -> tuple[int, ...]:
        out = []
        for _ in range(self.b):
            out.append(idx % self.npts)
            idx //= self.npts
        return tuple(reversed(out))

    def gradient(self, values: Sequence, g: int) -> list:
        """Finite-difference gradient of grid samples at point index g."""
        multi = self.multi(g)
        out = []
        for j in range(self.b):
            h = self.step(j)
            if h is None:
                out.append(values[g] * 0)
                continue
            i = multi[j]
            lo = list(multi)
            hi = list(multi)
            if 0 < i < self.npts - 1:
                lo[j] -= 1
                hi[j] += 1
                span = 2 * h
            elif i == 0:
                hi[j] += 1
                span = h
            else:
                lo[j] -= 1
                span = h
            diff = values[self.index(hi)] - values[self.index(lo)]
            if isinstance(diff, GaussRat):
                out.append(diff * GaussRat(Fraction(1, 1) / Fraction(span)))
            else:
                out.append(diff / span)
        return out


def grid_for(problem: Problem, box, npts: int, exact: bool = False) -> XiGrid:
    """Grid over the parameter box, broadcast to one axis per action."""
    box = tuple(tuple(pair) for pair in box)
    if len(box) == 1 and problem.b > 1:
        box = box * problem.b
    if len(box) != problem.b:
        raise ValueError(f"parameter box needs {problem.b} axes")
    return XiGrid(box=tuple((Fraction(str(lo)) if isinstance(lo, float) else
                             Fraction(lo),
                             Fraction(str(hi)) if isinstance(hi, float) else
                             Fraction(hi)) for lo, hi in box),
                  npts=npts, exact=exact)


# -- monomials ----------------------------------------------------------------

def _freeze_multiindex(spec) -> tuple[tuple[Site, int], ...]:
    if isinstance(spec, Mapping):
        items = spec.items()
    else:
        items = spec
    out = []
    for site, exp in items:
        site = tuple(int(x) for x in site)
        exp = int(exp)
        if exp < 0:
            raise ValueError("multi-index exponents must be nonnegative")
        if exp > 0:
            out.append((site, exp))
    out.sort(key=lambda t: t[0])
    for (s1, _), (s2, _) in zip(out, out[1:]):
        if s1 == s2:
            raise ValueError(f"repeated site {s1} in multi-index")
    return tuple(out)


@dataclass(frozen=True)
class Mono:
    """Monomial exponent data: Fourier index k, action powers l,
    and sparse normal-mode exponents alpha (z) and beta (zbar)."""

    k: tuple[int, ...]
    l: tuple[int, ...]
    alpha: tuple[tuple[Site, int], ...] = ()
    beta: tuple[tuple[Site, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(x) for x in self.k))
        l = tuple(int(x) for x in self.l)
        if any(x < 0 for x in l):
            raise ValueError("action exponents must be nonnegative")
        if len(l) != len(self.k):
            raise ValueError("k and l must have the same length")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "alpha", _freeze_multiindex(self.alpha))
        object.__setattr__(self, "beta", _freeze_multiindex(self.beta))

    @property
    def knorm(self) -> int:
        return sum(abs(x) for x in self.k)

    @property
    def degree(self) -> int:
        return (2 * sum(self.l) + sum(e for _, e in self.alpha)
                + sum(e for _, e in self.beta))

    def alpha_dict(self) -> dict[Site, int]:
        return dict(self.alpha)

    def beta_dict(self) -> dict[Site, int]:
        return dict(self.beta)

    def sites(self) -> set[Site]:
        return {s for s, _ in self.alpha} | {s for s, _ in self.beta}

    def key(self):
        flat = list(self.k) + list(self.l)
        for site, exp in self.alpha:
            flat.extend(site)
            flat.append(exp)
        for site, exp in self.beta:
            flat.extend(site)
            flat.append(exp)
        # pad marker so different shapes cannot collide in comparisons
        shape = (len(self.k), len(self.alpha), len(self.beta))
        return shape, signlex_key(tuple(flat))

    def conjugate(self) -> "Mono":
        return Mono(k=tuple(-x for x in self.k), l=self.l,
                    alpha=self.beta, beta=self.alpha)


def mono(k=(), l=(), alpha=(), beta=(), b: Optional[int] = None) -> Mono:
    """Convenience constructor padding k and l to a common length."""
    k = tuple(int(x) for x in k)
    l = tuple(int(x) for x in l)
    n = max(len(k), len(l), b or 0)
    k = k + (0,) * (n - len(k))
    l = l + (0,) * (n - len(l))
    return Mono(k=k, l=l, alpha=alpha, beta=beta)


def _mi_add(a: tuple[tuple[Site, int], ...], b) -> tuple:
    d = dict(a)
    for site, exp in b:
        d[site] = d.get(site, 0) + exp
    return _freeze_multiindex(d)


def _mi_sub_unit(a: tuple[tuple[Site, int], ...], site: Site) -> tuple:
    d = dict(a)
    d[site] -= 1
    return _freeze_multiindex(d)


def mono_mul(m1: Mono, m2: Mono) -> Mono:
    return Mono(k=tuple(x + y for x, y in zip(m1.k, m2.k)),
                l=tuple(x + y for x, y in zip(m1.l, m2.l)),
                alpha=_mi_add(m1.alpha, m2.alpha),
                beta=_mi_add(m1.beta, m2.beta))


# -- momentum -----------------------------------------------------------------

def momentum_k(k: Sequence[int], problem: Problem) -> Site:
    """Tangential part: sum of site vectors weighted by the Fourier index."""
    out = [0] * problem.d
    for ki, site in zip(k, problem.sites):
        for j in range(problem.d):
            out[j] += ki * site[j]
    return tuple(out)


def momentum(k: Sequence[int], alpha, beta, problem: Problem) -> Site:
    """Total momentum of a monomial; conserved terms return the origin."""
    out = list(momentum_k(k, problem))
    for site, exp in _freeze_multiindex(alpha):
        for j in range(problem.d):
            out[j] += exp * site[j]
    for site, exp in _freeze_multiindex(beta):
        for j in range(problem.d):
            out[j] -= exp * site[j]
    return tuple(out)


def mono_momentum(m: Mono, problem: Problem) -> Site:
    return momentum(m.k, m.alpha, m.beta, problem)


# -- series -------------------------------------------------------------------

Values = tuple


def _vals_add(a: Values, b: Values) -> Values:
    return tuple(x + y for x, y in zip(a, b))


def _vals_mul(a: Values, b: Values) -> Values:
    return tuple(x * y for x, y in zip(a, b))


def _vals_scale(a: Values, c) -> Values:
    return tuple(x * c for x in a)


def _vals_is_zero(a: Values) -> bool:
    return all(x == 0 or (isinstance(x, GaussRat) and x.re == 0 and x.im == 0)
               for x in a)


def _vals_conj(a: Values) -> Values:
    return tuple(x.conjugate() for x in a)


def _vals_max_abs(a: Values) -> float:
    return max((abs(x) for x in a), default=0.0)


@dataclass
class Series:
    """Finite sum of monomials with grid-sampled coefficients.

    Treat instances as immutable: every operation returns a new Series.
    trunc is (degree_max, k_max) or None for no truncation; dropped
    accumulates the coefficient mass removed by truncation.
    """

    terms: dict[Mono, Values]
    grid: XiGrid
    momentum_flag: bool = False
    trunc: Optional[tuple[int, int]] = None
    mode: str = "float"
    dropped: float = 0.0

    def __post_init__(self):
        if self.mode not in ("float", "exact"):
            raise ValueError("mode must be 'float' or 'exact'")

    @property
    def b(self) -> int:
        return self.grid.b

    def is_zero(self) -> bool:
        return not self.terms

    def coeff(self, m: Mono) -> Values:
        return self.terms.get(m, self._zero_values())

    def _zero_values(self) -> Values:
        z = GaussRat(0, 0) if self.mode == "exact" else 0j
        return (z,) * self.grid.size

    def ordered_terms(self) -> list[tuple[Mono, Values]]:
        return sorted(self.terms.items(), key=lambda kv: kv[0].key())

    def with_terms(self, terms: dict[Mono, Values],
                   dropped: float = None) -> "Series":
        return Series(terms=terms, grid=self.grid,
                      momentum_flag=self.momentum_flag, trunc=self.trunc,
                      mode=self.mode,
                      dropped=self.dropped if dropped is None else dropped)

    def map_coeffs(self, f: Callable[[Mono, Values], Values]) -> "Series":
        out = {}
        for m, v in self.terms.items():
            nv = f(m, v)
            if not _vals_is_zero(nv):
                out[m] = nv
        return self.with_terms(out)


def series(entries: Iterable[tuple[Mono, object]], grid: XiGrid,
           momentum_flag: bool = False,
           trunc: Optional[tuple[int, int]] = None, mode: str = "float",
           problem: Optional[Problem] = None) -> Series:
    """Build a Series from (monomial, coefficient) pairs.

    A scalar coefficient is broadcast across the grid.  Zero
    coefficients are dropped.  With momentum_flag and a problem, every
    monomial must conserve momentum.
    """
    size = grid.size
    terms: dict[Mono, Values] = {}
    for m, c in entries:
        if not isinstance(m, Mono):
            raise TypeError("series entries must be keyed by Mono")
        if isinstance(c, tuple):
            vals = c
            if len(vals) != size:
                raise ValueError("coefficient grid length mismatch")
        else:
            if mode == "exact":
                c = c if isinstance(c, GaussRat) else _as_gauss(c)
            else:
                c = complex(c)
            vals = (c,) * size
        if mode == "exact":
            vals = tuple(v if isinstance(v, GaussRat) else _as_gauss(v)
                         for v in vals)
        else:
            vals = tuple(complex(v) for v in vals)
        if m in terms:
            vals = _vals_add(terms[m], vals)
        if _vals_is_zero(vals):
            terms.pop(m, None)
        else:
            terms[m] = vals
    if momentum_flag and problem is not None:
        for m in terms:
            if any(mono_momentum(m, problem)):
                raise ValueError(f"monomial {m} violates momentum "
                                 "conservation")
    return Series(terms=terms, grid=grid, momentum_flag=momentum_flag,
                  trunc=trunc, mode=mode)


def zero_series(grid: XiGrid, momentum_flag: bool = False,
                trunc=None, mode: str = "float") -> Series:
    return Series(terms={}, grid=grid, momentum_flag=momentum_flag,
                  trunc=trunc, mode=mode)


def _check_compatible(F: Series, G: Series):
    if F.grid != G.grid:
        raise ValueError("series live on different parameter grids")
    if F.mode != G.mode:
        raise ValueError("cannot mix float and exact series")


def series_add(F: Series, G: Series) -> Series:
    _check_compatible(F, G)
    out = dict(F.terms)
    for m, v in G.terms.items():
        nv = _vals_add(out[m], v) if m in out else v
        if _vals_is_zero(nv):
            out.pop(m, None)
        else:
            out[m] = nv
    return Series(terms=out, grid=F.grid,
                  momentum_flag=F.momentum_flag and G.momentum_flag,
                  trunc=F.trunc or G.trunc, mode=F.mode,
                  dropped=F.dropped + G.dropped)


def series_scale(F: Series, c) -> Series:
    if F.mode == "exact" and not isinstance(c, GaussRat):
        c = _as_gauss(c)
    return F.map_coeffs(lambda m, v: _vals_scale(v, c))


def series_sub(F: Series, G: Series) -> Series:
    return series_add(F, series_scale(G, -1))


def series_mul(F: Series, G: Series,
               trunc: Optional[tuple[int, int]] = None) -> Series:
    """Product of two series, truncated; used by identity tests."""
    _check_compatible(F, G)
    trunc = trunc or F.trunc or G.trunc
    out: dict[Mono, Values] = {}
    dropped = 0.0
    for m1, v1 in F.terms.items():
        for m2, v2 in G.terms.items():
            m = mono_mul(m1, m2)
            v = _vals_mul(v1, v2)
            if trunc is not None and (m.degree > trunc[0]
                                      or m.knorm > trunc[1]):
                dropped += _vals_max_abs(v)
                continue
            nv = _vals_add(out[m], v) if m in out else v
            if _vals_is_zero(nv):
                out.pop(m, None)
            else:
                out[m] = nv
    return Series(terms=out, grid=F.grid,
                  momentum_flag=F.momentum_flag and G.momentum_flag,
                  trunc=trunc, mode=F.mode, dropped=dropped)


# -- norms --------------------------------------------------------------------

def log_site_weight(site: Site, rho: float, problem: Problem) -> float:
    """log of the analytic weight e^(rho |n|) |n|^(d+1) of a normal site."""
    n = math.sqrt(sum(x * x for x in site))
    return rho * n + (problem.d + 1) * math.log(n)


def site_weight(site: Site, rho: float, problem: Problem) -> float:
    """Analytic weight of a normal site; inf when out of float range."""
    try:
        return math.exp(log_site_weight(site, rho, problem))
    except OverflowError:
        return math.inf


def _gamma_of(m: Mono) -> dict[Site, int]:
    gamma: dict[Site, int] = {}
    for site, exp in m.alpha:
        gamma[site] = gamma.get(site, 0) + exp
    for site, exp in m.beta:
        gamma[site] = gamma.get(site, 0) + exp
    return gamma


def _log_sup(gamma: dict[Site, int], r: float, rho: float,
             problem: Problem) -> float:
    """log of the largest |z^gamma| over the weighted ball of radius r.

    Kept in log form so the huge site weights of far modes cancel
    against explicit weight factors instead of overflowing.
    """
    total = sum(gamma.values())
    if total == 0:
        return 0.0
    out = total * (math.log(r) - math.log(total))
    for site, exp in gamma.items():
        out += exp * (math.log(exp) - log_site_weight(site, rho, problem))
    return out


def _monomial_sup(m: Mono, r: float, rho: float, problem: Problem) -> float:
    """Largest |z^alpha zbar^beta| over the weighted ball of radius r."""
    lg = _log_sup(_gamma_of(m), r, rho, problem)
    try:
        return math.exp(lg)
    except OverflowError:
        return math.inf


def coeff_c1(values: Values, grid: XiGrid) -> float:
    """Sup over the grid of |value| plus the finite-difference gradient."""
    best = 0.0
    for g in range(grid.size):
        tot = abs(values[g]) + sum(abs(x) for x in grid.gradient(values, g))
        if tot > best:
            best = tot
    return best


def majorant_norm(F: Series, r: float, s: float, rho: float,
                  problem: Problem) -> float:
    """Weighted absolute-coefficient norm, exact per monomial.

    Sums |coeff|_C1 * r^(2|l|) * e^(|k| s) * sup|z^alpha zbar^beta| over
    terms; the per-monomial sup is the closed-form optimum over the ball
    sum_n w_n |z_n| <= r.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if s < 0:
        raise ValueError("s must be nonnegative")
    total = 0.0
    for m, vals in F.terms.items():
        c = coeff_c1(vals, F.grid)
        total += (c * r ** (2 * sum(m.l)) * math.exp(m.knorm * s)
                  * _monomial_sup(m, r, rho, problem))
    return total


def series_dI(F: Series, j: int) -> Series:
    def f(m: Mono, v: Values):
        return m, v

    out = {}
    for m, v in F.terms.items():
        if m.l[j] == 0:
            continue
        nl = list(m.l)
        c = nl[j]
        nl[j] -= 1
        nm = Mono(k=m.k, l=tuple(nl), alpha=m.alpha, beta=m.beta)
        nv = _vals_scale(v, c)
        out[nm] = _vals_add(out[nm], nv) if nm in out else nv
    return F.with_terms({m: v for m, v in out.items()
                         if not _vals_is_zero(v)})


def series_dtheta(F: Series, j: int) -> Series:
    i_unit = GaussRat(0, 1) if F.mode == "exact" else 1j
    out = {}
    for m, v in F.terms.items():
        if m.k[j] == 0:
            continue
        nv = _vals_scale(v, i_unit * m.k[j])
        out[m] = _vals_add(out[m], nv) if m in out else nv
    return F.with_terms({m: v for m, v in out.items()
                         if not _vals_is_zero(v)})


def series_dz(F: Series, site: Site, conjugated: bool = False) -> Series:
    site = tuple(site)
    out = {}
    for m, v in F.terms.items():
        mi = m.beta if conjugated else m.alpha
        exp = dict(mi).get(site, 0)
        if exp == 0:
            continue
        if conjugated:
            nm = Mono(k=m.k, l=m.l, alpha=m.alpha,
                      beta=_mi_sub_unit(m.beta, site))
        else:
            nm = Mono(k=m.k, l=m.l, alpha=_mi_sub_unit(m.alpha, site),
                      beta=m.beta)
        nv = _vals_scale(v, exp)
        out[nm] = _vals_add(out[nm], nv) if nm in out else nv
    return F.with_terms({m: v for m, v in out.items()
                         if not _vals_is_zero(v)})


def vector_field_norm(F: Series, r: float, s: float, rho: float,
                      problem: Problem) -> float:
    """Majorant norm of the Hamiltonian vector field of F.

    sum_j ||F_I_j|| + r^-2 sum_j ||F_theta_j||
    + r^-1 sum_n w_n (||F_z_n|| + ||F_zbar_n||).

    The z part is accumulated per term in log form: the weight of the
    derivative site cancels against the monomial sup analytically, so
    far modes contribute their finite value instead of overflowing.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if s < 0:
        raise ValueError("s must be nonnegative")
    total = 0.0
    for j in range(F.b):
        total += majorant_norm(series_dI(F, j), r, s, rho, problem)
        total += majorant_norm(series_dtheta(F, j), r, s, rho, problem) / r ** 2
    zpart = 0.0
    for m, vals in F.terms.items():
        c = None
        gamma = _gamma_of(m)
        base = 2 * sum(m.l) * math.log(r) + m.knorm * s
        for mi in (m.alpha, m.beta):
            for site, exp in mi:
                if c is None:
                    c = coeff_c1(vals, F.grid)
                    if c == 0.0:
                        break
                w_log = log_site_weight(site, rho, problem)
                reduced = dict(gamma)
                reduced[site] -= 1
                if reduced[site] == 0:
                    del reduced[site]
                lg = base + w_log + _log_sup(reduced, r, rho, problem)
                zpart += c * exp * math.exp(lg)
            if c == 0.0:
                break
    return total + zpart / r


# -- projections ---------------------------------------------------------------

def project(F: Series, predicate: Callable[[Mono], bool]) -> Series:
    kept = {m: v for m, v in F.terms.items() if predicate(m)}
    return F.with_terms(kept)


def pred_k_le(K: int) -> Callable[[Mono], bool]:
    return lambda m: m.knorm <= K


def pred_k_lt(N: int) -> Callable[[Mono], bool]:
    return lambda m: m.knorm < N


def pred_k_ge(N: int) -> Callable[[Mono], bool]:
    return lambda m: m.knorm >= N


def pred_degree_le(D: int) -> Callable[[Mono], bool]:
    return lambda m: m.degree <= D


# -- Poisson bracket ------------------------------------------------------------

def poisson_bracket(F: Series, G: Series,
                    trunc: Optional[tuple[int, int]] = None,
                    site_filter: Optional[Callable[[Site], bool]] = None,
                    include_action: bool = True) -> Series:
    """Poisson bracket with the diagonal-normal-form sign convention.

    {F, G} = sum_j (F_I_j G_theta_j - F_theta_j G_I_j)
           + i sum_n (F_zbar_n G_z_n - F_z_n G_zbar_n).

    site_filter restricts the z-derivative sum to chosen normal sites;
    include_action=False drops the action-angle part.  Results beyond
    trunc are discarded with their mass recorded on `dropped`.
    """
    _check_compatible(F, G)
    trunc = trunc or F.trunc or G.trunc
    i_unit = GaussRat(0, 1) if F.mode == "exact" else 1j
    out: dict[Mono, Values] = {}
    dropped = 0.0

    def emit(m: Mono, v: Values):
        nonlocal dropped
        if _vals_is_zero(v):
            return
        if trunc is not None and (m.degree > trunc[0] or m.knorm > trunc[1]):
            dropped += _vals_max_abs(v)
            return
        if m in out:
            nv = _vals_add(out[m], v)
            if _vals_is_zero(nv):
                del out[m]
            else:
                out[m] = nv
        else:
            out[m] = v

    b = F.b
    for m1, v1 in F.terms.items():
        a1 = dict(m1.alpha)
        b1 = dict(m1.beta)
        for m2, v2 in G.terms.items():
            v12 = _vals_mul(v1, v2)
            if include_action:
                for j in range(b):
                    w = m1.l[j] * m2.k[j] - m1.k[j] * m2.l[j]
                    if w == 0:
                        continue
                    nl = tuple(x + y - (1 if jj == j else 0)
                               for jj, (x, y) in
                               enumerate(zip(m1.l, m2.l)))
                    nm = Mono(k=tuple(x + y for x, y in zip(m1.k, m2.k)),
                              l=nl, alpha=_mi_add(m1.alpha, m2.alpha),
                              beta=_mi_add(m1.beta, m2.beta))
                    emit(nm, _vals_scale(v12, i_unit * w))
            a2 = dict(m2.alpha)
            b2 = dict(m2.beta)
            shared = (set(a1) | set(b1)) & (set(a2) | set(b2))
            for site in shared:
                if site_filter is not None and not site_filter(site):
                    continue
                w = (b1.get(site, 0) * a2.get(site, 0)
                     - a1.get(site, 0) * b2.get(site, 0))
                if w == 0:
                    continue
                nm = Mono(k=tuple(x + y for x, y in zip(m1.k, m2.k)),
                          l=tuple(x + y for x, y in zip(m1.l, m2.l)),
                          alpha=_mi_sub_unit(_mi_add(m1.alpha, m2.alpha),
                                             site),
                          beta=_mi_sub_unit(_mi_add(m1.beta, m2.beta),
                                            site))
                emit(nm, _vals_scale(v12, i_unit * w))
    return Series(terms=out, grid=F.grid,
                  momentum_flag=F.momentum_flag and G.momentum_flag,
                  trunc=trunc, mode=F.mode, dropped=dropped)


# -- bracket splitting by derivative site --------------------------------------

@dataclass(frozen=True)
class SiteClassifier:
    """Splits normal sites into low, high and rest bands by norm.

    low: |j| < 4 N^3; high: |j| > N^tau1 / 2.  The bands must not
    overlap, which needs 4 N^3 < N^tau1 / 2.
    """

    N: int
    tau1: Fraction

    def __post_init__(self):
        low_cap = 4 * self.N ** 3
        # exact check of 4 N^3 < N^tau1 / 2 via cleared denominators
        t = Fraction(self.tau1)
        lhs = Fraction(8 * low_cap) ** t.denominator
        rhs = Fraction(self.N) ** t.numerator
        if lhs >= rhs:
            raise ValueError("low and high bands overlap: need "
                             "4 N^3 < N^tau1 / 2")

    def of(self, site: Site) -> str:
        n2 = sum(x * x for x in site)
        if n2 < (4 * self.N ** 3) ** 2:
            return "low"
        t = Fraction(self.tau1)
        # |site| > N^tau1 / 2  <=>  (2 |site|)^2q > N^2p with t = p/q
        if (4 * n2) ** t.denominator > self.N ** (2 * t.numerator):
            return "high"
        return "rest"


BRACKET_PARTS = ("Itheta", "L", "H", "R")


def split_bracket(F: Series, G: Series, classifier: SiteClassifier,
                  part: str, trunc: Optional[tuple[int, int]] = None) -> Series:
    """One named part of the bracket; the four parts sum to the whole."""
    aliases = {"Itheta": "Itheta", "Iϑ": "Itheta", "L": "L", "H": "H",
               "R": "R"}
    if part not in aliases:
        raise ValueError(f"part must be one of {BRACKET_PARTS}")
    part = aliases[part]
    if part == "Itheta":
        return poisson_bracket(F, G, trunc=trunc,
                               site_filter=lambda s: False,
                               include_action=True)
    band = {"L": "low", "H": "high", "R": "rest"}[part]
    return poisson_bracket(F, G, trunc=trunc,
                           site_filter=lambda s: classifier.of(s) == band,
                           include_action=False)


# -- Lie transform --------------------------------------------------------------

def lie_transform(F: Series, H: Series, order: int,
                  trunc: Optional[tuple[int, int]] = None
                  ) -> tuple[Series, float]:
    """exp(ad F) H truncated at the given order.

    Returns the transformed series and the coefficient mass of the last
    included term as a crude remainder indicator.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    acc = H
    term = H
    last_mass = 0.0
    for j in range(1, order + 1):
        term = poisson_bracket(F, term, trunc=trunc)
        if F.mode == "exact":
            term = series_scale(term, GaussRat(Fraction(1, j), 0))
        else:
            term = series_scale(term, 1.0 / j)
        acc = series_add(acc, term)
        last_mass = sum(_vals_max_abs(v) for v in term.terms.values())
        if term.is_zero():
            break
    return acc, last_mass


# -- analytic estimates ----------------------------------------------------------

def cauchy_check(F: Series, G: Series, r: float, s: float, r2: float,
                 s2: float, rho: float, problem: Problem) -> dict:
    """Compare the bracket's vector-field norm against the product bound.

    The bound is 2^(2d+1) delta^-1 ||X_F|| ||X_G|| with
    delta = (r2/r)^2 min(s - s2, 1 - r2/r), evaluated at (r2, s2).
    """
    if not (0 < r2 < r and 0 <= s2 < s):
        raise ValueError("need 0 < r2 < r and 0 <= s2 < s")
    delta = (r2 / r) ** 2 * min(s - s2, 1 - r2 / r)
    lhs = vector_field_norm(poisson_bracket(F, G), r2, s2, rho, problem)
    nf = vector_field_norm(F, r, s, rho, problem)
    ng = vector_field_norm(G, r, s, rho, problem)
    rhs = 2 ** (2 * problem.d + 1) / delta * nf * ng
    return {"lhs": lhs, "rhs": rhs, "delta": delta,
            "ratio": lhs / rhs if rhs > 0 else 0.0,
            "ok": lhs <= rhs + 1e-12 * max(1.0, rhs)}


def reality_violation(F: Series) -> float:
    """How far F is from defining a real-valued function.

    Zero iff the coefficient of (k, l, alpha, beta) is the conjugate of
    the coefficient of (-k, l, beta, alpha) throughout.
    """
    worst = 0.0
    for m, v in F.terms.items():
        mirror = F.coeff(m.conjugate())
        diff = _vals_add(_vals_conj(v), _vals_scale(mirror, -1))
        worst = max(worst, _vals_max_abs(diff))
    return worst


# -- serialization ----------------------------------------------------------------

def _vals_to_json(vals: Values, mode: str):
    if mode == "exact":
        return ([str(v.re) for v in vals], [str(v.im) for v in vals])
    return ([v.real for v in vals], [v.imag for v in vals])


def _vals_from_json(re, im, mode: str) -> Values:
    if mode == "exact":
        return tuple(GaussRat(Fraction(a), Fraction(b))
                     for a, b in zip(re, im))
    return tuple(complex(a, b) for a, b in zip(re, im))


def save_series(F: Series, path, problem: Optional[Problem] = None):
    """One JSON object per line: a header, then one line per monomial."""
    header = {
        "format": "series",
        "mode": F.mode,
        "momentum_flag": F.momentum_flag,
        "trunc": list(F.trunc) if F.trunc else None,
        "grid": {"box": [[str(lo), str(hi)] for lo, hi in F.grid.box],
                 "npts": F.grid.npts, "exact": F.grid.exact},
        "b": F.b,
    }
    if problem is not None:
        header["problem"] = {"d": problem.d, "b": problem.b,
                             "sites": [list(s) for s in problem.sites]}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for m, vals in F.ordered_terms():
            re, im = _vals_to_json(vals, F.mode)
            fh.write(json.dumps({
                "k": list(m.k), "l": list(m.l),
                "alpha": [[list(site), exp] for site, exp in m.alpha],
                "beta": [[list(site), exp] for site, exp in m.beta],
                "coeff_re": re, "coeff_im": im,
            }, sort_keys=True) + "\n")


def load_series(path) -> Series:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty series file")
    header = json.loads(lines[0])
    if header.get("format") != "series":
        raise ValueError("not a series file")
    mode = header["mode"]
    grid = XiGrid(box=tuple((Fraction(lo), Fraction(hi))
                            for lo, hi in header["grid"]["box"]),
                  npts=header["grid"]["npts"],
                  exact=header["grid"]["exact"])
    terms = {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        m = Mono(k=tuple(rec["k"]), l=tuple(rec["l"]),
                 alpha=tuple((tuple(site), exp) for site, exp in rec["alpha"]),
                 beta=tuple((tuple(site), exp) for site, exp in rec["beta"]))
        terms[m] = _vals_from_json(rec["coeff_re"], rec["coeff_im"], mode)
    trunc = tuple(header["trunc"]) if header.get("trunc") else None
    return Series(terms=terms, grid=grid,
                  momentum_flag=header["momentum_flag"], trunc=trunc,
                  mode=mode)
