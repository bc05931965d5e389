"""Problem geometry and parameter containers, with exact validation.

All threshold parameters (tau0, tau1, c, C, theta, mu, tau) are rationals
so that cut classification is bit-reproducible; JSON configs serialize them
as "p/q" strings.  Two validation modes exist: "paper" enforces the full
inequality set the large-scale theory needs, "desk" only enforces the
inequalities the constructions themselves need and records the rest as
named failures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from qtkam.thresholds import PowVal, npow


def frac(x) -> Fraction:
    """Parse a rational from int, Fraction or 'p/q' string."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float) and x == int(x):
        return Fraction(int(x))
    raise TypeError(f"expected an exact rational, got {x!r}")


def _ceil_norm(site: tuple[int, ...]) -> int:
    s2 = sum(x * x for x in site)
    r = math.isqrt(s2)
    return r if r * r == s2 else r + 1


@dataclass(frozen=True)
class Problem:
    """Ambient dimension, tangential site count and the sites themselves.

    The first site must be the zero vector (translation normalization).
    C1 is the ball-size constant: the smallest integer >= every |site|,
    with a floor of 1.
    """

    d: int
    b: int
    sites: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.b < 1:
            raise ValueError("b must be >= 1")
        sites = tuple(tuple(int(x) for x in s) for s in self.sites)
        object.__setattr__(self, "sites", sites)
        if len(sites) != self.b:
            raise ValueError(f"expected {self.b} sites, got {len(sites)}")
        if any(len(s) != self.d for s in sites):
            raise ValueError("every site must have length d")
        if len(set(sites)) != self.b:
            raise ValueError("sites must be distinct")
        if any(sites[0]):
            raise ValueError("the first site must be the zero vector")

    @property
    def C1(self) -> int:
        return max(1, max(_ceil_norm(s) for s in self.sites))

    def is_normal_site(self, m: tuple[int, ...]) -> bool:
        """m lies in the normal-site lattice (not a tangential site)."""
        return tuple(m) not in set(self.sites)


@dataclass(frozen=True)
class LatticeParams:
    """Exponent and constant pack for the lattice geometry.

    gap is the exponent multiplier separating the small threshold mu*N^tau
    from the large one theta*N^(gap*tau); the large-scale theory fixes
    gap = 4d and paper mode enforces that, while desk mode may shrink it so
    the machinery is nontrivial inside small boxes.  gap=None means 4d.
    """

    tau0: Fraction
    tau1: Fraction
    c: Fraction
    C: Fraction
    N0: int
    mode: str = "paper"
    gap: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tau0", frac(self.tau0))
        object.__setattr__(self, "tau1", frac(self.tau1))
        object.__setattr__(self, "c", frac(self.c))
        object.__setattr__(self, "C", frac(self.C))
        if self.mode not in ("paper", "desk"):
            raise ValueError("mode must be 'paper' or 'desk'")
        if self.gap is not None and self.gap < 1:
            raise ValueError("gap must be a positive integer")

    def gap_for(self, d: int) -> int:
        return self.gap if self.gap is not None else 4 * d


@dataclass(frozen=True)
class CutParams:
    """Parameters (N, theta, mu, tau) of a single cut classification."""

    N: int
    theta: Fraction
    mu: Fraction
    tau: Fraction

    def __post_init__(self):
        object.__setattr__(self, "theta", frac(self.theta))
        object.__setattr__(self, "mu", frac(self.mu))
        object.__setattr__(self, "tau", frac(self.tau))
        if self.N < 1:
            raise ValueError("N must be a positive integer")

    def low_threshold(self) -> PowVal:
        """mu * N^tau."""
        return PowVal(self.mu, self.N, self.tau)

    def high_threshold(self, gap: int) -> PowVal:
        """theta * N^(gap*tau)."""
        return PowVal(self.theta, self.N, Fraction(gap) * self.tau)


@dataclass(frozen=True)
class AnalysisParams:
    """Analytic-domain and iteration parameters for the series layer."""

    r: float = 0.1
    s: float = 2.0
    rho: float = 1.0
    gamma: float = 1e-3
    K: int = 3
    degree_max: int = 4
    kmax: int = 16
    xi_box: tuple[tuple[float, float], ...] = ((0.4, 0.6),)
    xi_points: int = 3
    chi: float = 1.32
    lie_order: int = 6

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.xi_box)
        object.__setattr__(self, "xi_box", box)
        if any(hi < lo for lo, hi in box):
            raise ValueError("xi_box intervals must have lo <= hi")
        if self.xi_points < 1:
            raise ValueError("xi_points must be >= 1")
        if not (0 < self.r) or not (0 < self.s) or not (0 < self.rho):
            raise ValueError("r, s, rho must be positive")

    @property
    def D(self) -> float:
        """Diameter of the parameter box (sup-norm side length)."""
        return max(hi - lo for lo, hi in self.xi_box)


@dataclass
class ValidationReport:
    """Outcome of parameter validation.

    errors block execution in any mode; recorded failures are paper-scale
    inequalities that a desk run is allowed to violate knowingly.
    """

    mode: str
    errors: list[str] = field(default_factory=list)
    recorded_failures: list[str] = field(default_factory=list)
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def check(self, name: str, passed: bool, detail: str = "", hard: bool = False):
        self.checks.append((name, passed, detail))
        if passed:
            return
        if hard or self.mode == "paper":
            self.errors.append(f"{name}: {detail}" if detail else name)
        else:
            self.recorded_failures.append(f"{name}: {detail}" if detail else name)

    def summary(self) -> str:
        lines = [f"validation mode={self.mode} ok={self.ok}"]
        for name, passed, detail in self.checks:
            mark = "pass" if passed else "FAIL"
            lines.append(f"  [{mark}] {name}" + (f" ({detail})" if detail else ""))
        for e in self.errors:
            lines.append(f"  error: {e}")
        for f in self.recorded_failures:
            lines.append(f"  recorded: {f}")
        return "\n".join(lines)


def validate(problem: Problem, lat: LatticeParams,
             cut: Optional[CutParams] = None) -> ValidationReport:
    """Check the inequality matrix tying problem geometry to parameters."""
    rep = ValidationReport(mode=lat.mode)
    d = problem.d
    g = lat.gap_for(d)

    rep.check("tau0 positive", lat.tau0 > 0, hard=True)
    rep.check("constant window 0 < c < C", 0 < lat.c < lat.C, hard=True)
    rep.check("N0 positive", lat.N0 >= 1, hard=True)
    rep.check(
        "tau1 > gap*tau0 (allowable range nonempty)",
        lat.tau1 > g * lat.tau0,
        f"tau1={lat.tau1}, gap*tau0={g * lat.tau0}",
        hard=True,
    )
    if lat.mode == "paper":
        rep.check("paper gap = 4d", g == 4 * d, f"gap={g}, 4d={4 * d}")

    # paper-scale inequality set
    tau0_floor = max(d + problem.b, 12)
    rep.check("tau0 > max(d+b, 12)", lat.tau0 > tau0_floor,
              f"tau0={lat.tau0}, floor={tau0_floor}")
    tau1_exact = Fraction((4 * d) ** (d + 1)) * (lat.tau0 + 1)
    rep.check("tau1 = (4d)^(d+1)(tau0+1)", lat.tau1 == tau1_exact,
              f"tau1={lat.tau1}, formula={tau1_exact}")
    rep.check("c <= 1/2", lat.c <= Fraction(1, 2), f"c={lat.c}")
    rep.check("C >= 4", lat.C >= 4, f"C={lat.C}")
    n0_floor = Fraction(math.factorial(d) * problem.C1 ** d) * lat.C / lat.c
    rep.check("N0 >= d! C1^d C / c", lat.N0 >= n0_floor,
              f"N0={lat.N0}, floor={n0_floor}")

    if cut is not None:
        rep.check("c < theta < C", lat.c < cut.theta < lat.C,
                  f"theta={cut.theta}", hard=True)
        rep.check("c < mu < C", lat.c < cut.mu < lat.C, f"mu={cut.mu}", hard=True)
        rep.check("tau0 <= tau <= tau1/gap",
                  lat.tau0 <= cut.tau <= lat.tau1 / g,
                  f"tau={cut.tau}, range=[{lat.tau0}, {lat.tau1 / g}]", hard=True)
        sep = cut.high_threshold(g) > cut.low_threshold()
        rep.check("theta*N^(gap*tau) > mu*N^tau (cut uniqueness)", sep,
                  f"N={cut.N}", hard=True)
        rep.check("N >= N0", cut.N >= lat.N0, f"N={cut.N}, N0={lat.N0}")
    return rep


# -- configuration files --------------------------------------------------


@dataclass
class Config:
    problem: Problem
    lattice: LatticeParams
    cut: Optional[CutParams] = None
    analysis: Optional[AnalysisParams] = None


def load_config(path) -> Config:
    raw = json.loads(Path(path).read_text())
    p = raw["problem"]
    problem = Problem(d=int(p["d"]), b=int(p["b"]),
                      sites=tuple(tuple(int(x) for x in s) for s in p["sites"]))
    lr = raw["lattice"]
    lattice = LatticeParams(
        tau0=frac(lr["tau0"]), tau1=frac(lr["tau1"]), c=frac(lr["c"]),
        C=frac(lr["C"]), N0=int(lr["N0"]), mode=lr.get("mode", "paper"),
        gap=(int(lr["gap"]) if lr.get("gap") is not None else None),
    )
    cut = None
    if raw.get("cut"):
        cr = raw["cut"]
        cut = CutParams(N=int(cr["N"]), theta=frac(cr["theta"]),
                        mu=frac(cr["mu"]), tau=frac(cr["tau"]))
    analysis = None
    if raw.get("analysis"):
        ar = dict(raw["analysis"])
        if "xi_box" in ar:
            ar["xi_box"] = tuple((float(lo), float(hi)) for lo, hi in ar["xi_box"])
        analysis = AnalysisParams(**ar)
    return Config(problem=problem, lattice=lattice, cut=cut, analysis=analysis)


def save_config(cfg: Config, path) -> None:
    out = {
        "problem": {"d": cfg.problem.d, "b": cfg.problem.b,
                    "sites": [list(s) for s in cfg.problem.sites]},
        "lattice": {"tau0": str(cfg.lattice.tau0), "tau1": str(cfg.lattice.tau1),
                    "c": str(cfg.lattice.c), "C": str(cfg.lattice.C),
                    "N0": cfg.lattice.N0, "mode": cfg.lattice.mode,
                    "gap": cfg.lattice.gap},
    }
    if cfg.cut is not None:
        out["cut"] = {"N": cfg.cut.N, "theta": str(cfg.cut.theta),
                      "mu": str(cfg.cut.mu), "tau": str(cfg.cut.tau)}
    if cfg.analysis is not None:
        a = cfg.analysis
        out["analysis"] = {
            "r": a.r, "s": a.s, "rho": a.rho, "gamma": a.gamma, "K": a.K,
            "degree_max": a.degree_max, "kmax": a.kmax,
            "xi_box": [list(iv) for iv in a.xi_box], "xi_points": a.xi_points,
            "chi": a.chi, "lie_order": a.lie_order,
        }
    Path(path).write_text(json.dumps(out, indent=2) + "\n")
