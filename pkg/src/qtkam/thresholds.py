"""Exact arithmetic for threshold values of the form m * N**e.

Cut classification compares integer lattice data against thresholds like
mu * N**tau with rational mu and tau.  Floating point would make the
classification depend on rounding, so thresholds are kept symbolic as a
positive rational mantissa times an integer base raised to a rational
exponent, and comparisons clear denominators exactly.
"""

from __future__ import annotations

import math
from fractions import Fraction


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(x).limit_denominator(10**12)
    raise TypeError(f"cannot interpret {x!r} as an exact rational")


class PowVal:
    """Positive value ``mantissa * base**exponent`` with exact comparisons.

    mantissa is a positive rational, base a positive integer, exponent a
    rational.  Values with the same base compare exactly; values also
    compare exactly against plain rationals and integers.
    """

    __slots__ = ("mantissa", "base", "exponent")

    def __init__(self, mantissa, base: int, exponent):
        m = _as_fraction(mantissa)
        if m <= 0:
            raise ValueError("mantissa must be positive")
        base = int(base)
        if base < 1:
            raise ValueError("base must be a positive integer")
        e = _as_fraction(exponent)
        if base == 1:
            e = Fraction(0)
        self.mantissa = m
        self.base = base
        self.exponent = e

    # -- arithmetic ------------------------------------------------------

    def __mul__(self, other):
        if isinstance(other, PowVal):
            if self.base == other.base:
                return PowVal(self.mantissa * other.mantissa, self.base,
                              self.exponent + other.exponent)
            if other.exponent == 0:
                return PowVal(self.mantissa * other.mantissa, self.base, self.exponent)
            if self.exponent == 0:
                return PowVal(self.mantissa * other.mantissa, other.base, other.exponent)
            raise ValueError("PowVal product needs a common base")
        return PowVal(self.mantissa * _as_fraction(other), self.base, self.exponent)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, PowVal):
            if self.base == other.base:
                return PowVal(self.mantissa / other.mantissa, self.base,
                              self.exponent - other.exponent)
            if other.exponent == 0:
                return PowVal(self.mantissa / other.mantissa, self.base, self.exponent)
            if self.exponent == 0:
                return PowVal(self.mantissa / other.mantissa, other.base, -other.exponent)
            raise ValueError("PowVal quotient needs a common base")
        return PowVal(self.mantissa / _as_fraction(other), self.base, self.exponent)

    def __pow__(self, k: int):
        if not isinstance(k, int):
            raise TypeError("PowVal powers must be integers")
        if k == 0:
            return PowVal(1, self.base, 0)
        return PowVal(self.mantissa ** k, self.base, self.exponent * k)

    # -- comparisons -----------------------------------------------------

    def _cmp(self, other) -> int:
        """Exact three-way comparison; other is PowVal, int or Fraction."""
        if isinstance(other, PowVal):
            if self.base == other.base:
                # cheap path: only the exponent difference matters
                de = self.exponent - other.exponent
                q = de.denominator
                lhs = (self.mantissa / other.mantissa) ** q \
                    * Fraction(self.base) ** de.numerator
                return (lhs > 1) - (lhs < 1)
            q = self.exponent.denominator * other.exponent.denominator \
                // math.gcd(self.exponent.denominator,
                            other.exponent.denominator)
            lhs = self.mantissa ** q * Fraction(self.base) ** int(self.exponent * q)
            rhs = other.mantissa ** q * Fraction(other.base) ** int(other.exponent * q)
            return (lhs > rhs) - (lhs < rhs)
        r = _as_fraction(other)
        if r <= 0:
            return 1
        q = self.exponent.denominator
        lhs = self.mantissa ** q * Fraction(self.base) ** self.exponent.numerator
        rhs = r ** q
        return (lhs > rhs) - (lhs < rhs)

    def __lt__(self, other):
        return self._cmp(other) < 0

    def __le__(self, other):
        return self._cmp(other) <= 0

    def __gt__(self, other):
        return self._cmp(other) > 0

    def __ge__(self, other):
        return self._cmp(other) >= 0

    def __eq__(self, other):
        if isinstance(other, (PowVal, int, Fraction)):
            return self._cmp(other) == 0
        return NotImplemented

    def __hash__(self):
        # canonical: integer-exponent values hash like their Fraction value
        if self.exponent.denominator == 1:
            return hash(self.mantissa * Fraction(self.base) ** self.exponent.numerator)
        return hash((self.mantissa, self.base, self.exponent))

    # -- conversions -----------------------------------------------------

    def log10(self) -> float:
        return math.log10(self.mantissa) + float(self.exponent) * math.log10(self.base)

    def __float__(self):
        lg = self.log10()
        if lg > 300:
            return math.inf
        if self.exponent.denominator == 1 and abs(self.exponent.numerator) < 1000:
            return float(self.mantissa * Fraction(self.base) ** self.exponent.numerator)
        return 10.0 ** lg

    def as_fraction(self) -> Fraction:
        """Exact value when the exponent is a nonnegative integer."""
        if self.exponent.denominator != 1:
            raise ValueError("exponent is not an integer")
        return self.mantissa * Fraction(self.base) ** self.exponent.numerator

    def __repr__(self):
        return f"PowVal({self.mantissa}*{self.base}^{self.exponent})"


def npow(base: int, exponent) -> PowVal:
    """The value base**exponent as an exact PowVal."""
    return PowVal(1, base, exponent)


def pv_max(a, b):
    """Larger of two exactly comparable values (PowVal or rational)."""
    if isinstance(a, PowVal):
        return a if a >= b else b
    if isinstance(b, PowVal):
        return b if b >= a else a
    return a if _as_fraction(a) >= _as_fraction(b) else b


def pv_cmp(a, b) -> int:
    """Three-way exact comparison of PowVal/rational values."""
    if isinstance(a, PowVal):
        return a._cmp(b)
    if isinstance(b, PowVal):
        return -b._cmp(a)
    fa, fb = _as_fraction(a), _as_fraction(b)
    return (fa > fb) - (fa < fb)
