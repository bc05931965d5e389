import math
import random
from fractions import Fraction

import pytest

from qtkam.thresholds import PowVal, npow, pv_cmp, pv_max


def test_basic_value():
    v = PowVal(3, 2, 4)
    assert float(v) == 48.0
    assert v.as_fraction() == 48


def test_rejects_nonpositive_mantissa():
    with pytest.raises(ValueError):
        PowVal(0, 2, 3)
    with pytest.raises(ValueError):
        PowVal(-1, 2, 3)


def test_fractional_exponent_value():
    v = PowVal(1, 2, Fraction(1, 2))
    assert abs(float(v) - math.sqrt(2)) < 1e-12
    with pytest.raises(ValueError):
        v.as_fraction()


def test_compare_same_base():
    assert PowVal(1, 10, 3) < PowVal(1, 10, 4)
    assert PowVal(5, 10, 3) > PowVal(1, 10, 3)
    assert PowVal(10, 10, 3) == PowVal(1, 10, 4)


def test_compare_same_exponent_different_base():
    # 2^3 vs 3^3: equal exponents, different bases
    assert PowVal(1, 2, 3) < PowVal(1, 3, 3)
    assert PowVal(1, 3, 3) > PowVal(1, 2, 3)
    assert PowVal(2, 2, 5) == PowVal(1, 2, 6)


def test_compare_against_rationals():
    v = PowVal(Fraction(1, 2), 2, 5)  # 16
    assert v == 16
    assert v > Fraction(31, 2)
    assert v < 17
    assert v > 0


def test_compare_beyond_float_range():
    # equal exponents of 10^400 scale: floats overflow, comparison must not
    big = PowVal(1, 10, 400)
    bigger = PowVal(1, 10, 400) * Fraction(3, 2)
    assert big < bigger
    assert float(big) == math.inf


def test_fractional_exponent_comparison_is_exact():
    # 2^(1/2) vs 3/2: 2 < 9/4 so sqrt(2) < 3/2
    assert PowVal(1, 2, Fraction(1, 2)) < Fraction(3, 2)
    # 2^(3/2) vs 2.83 = 283/100: 2^3 = 8 vs (283/100)^2 = 8.0089
    assert PowVal(1, 2, Fraction(3, 2)) < Fraction(283, 100)
    assert PowVal(1, 2, Fraction(3, 2)) > Fraction(282, 100)


def test_mul_div_pow():
    a = PowVal(3, 2, 4)
    b = PowVal(1, 2, 2)
    assert (a * b).as_fraction() == 192
    assert (a / b).as_fraction() == 12
    assert (a * 2).as_fraction() == 96
    assert (2 * a).as_fraction() == 96
    assert (a ** 2).as_fraction() == 48 * 48
    assert (a / Fraction(1, 2)).as_fraction() == 96


def test_mixing_bases_requires_trivial_exponent():
    a = PowVal(3, 2, 4)
    c = PowVal(5, 7, 0)  # exponent 0: plain mantissa
    assert (a * c).as_fraction() == 240
    with pytest.raises(ValueError):
        a * PowVal(1, 3, 2)


def test_random_comparisons_match_floats():
    rng = random.Random(20240811)
    for _ in range(400):
        m1 = Fraction(rng.randint(1, 40), rng.randint(1, 40))
        m2 = Fraction(rng.randint(1, 40), rng.randint(1, 40))
        b1 = rng.randint(2, 7)
        b2 = rng.randint(2, 7)
        e1 = Fraction(rng.randint(-12, 12), rng.randint(1, 4))
        e2 = Fraction(rng.randint(-12, 12), rng.randint(1, 4))
        v1 = PowVal(m1, b1, e1)
        v2 = PowVal(m2, b2, e2)
        f1 = float(m1) * b1 ** float(e1)
        f2 = float(m2) * b2 ** float(e2)
        if abs(f1 - f2) < 1e-9 * max(f1, f2):
            continue  # too close for the float oracle to referee
        want = -1 if f1 < f2 else 1
        assert pv_cmp(v1, v2) == want, (v1, v2)


def test_npow_and_max():
    assert npow(2, 5) == 32
    assert float(pv_max(npow(2, 3), npow(2, 4))) == 16.0
    assert pv_max(npow(2, 3), Fraction(100)) == 100


def test_float_of_integer_exponent_is_exact():
    assert float(PowVal(4, 2, 5)) == 128.0
    assert float(PowVal(Fraction(1, 2), 2, 8)) == 128.0
