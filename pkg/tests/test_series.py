import math
import random
from fractions import Fraction

import pytest

from qtkam.params import Problem
from qtkam.series import (GaussRat, SiteClassifier, cauchy_check, coeff_c1,
                          grid_for, lie_transform, load_series, majorant_norm,
                          momentum, mono, mono_momentum, poisson_bracket,
                          pred_degree_le, pred_k_ge, pred_k_lt, project,
                          reality_violation, save_series, series, series_add,
                          series_mul, series_scale, series_sub, split_bracket,
                          vector_field_norm, zero_series)

PROB = Problem(d=2, b=2, sites=((0, 0), (1, 0)))
R, S, RHO = 0.1, 2.0, 1.0


def grid1():
    return grid_for(PROB, ((0.4, 0.6),), 1)


def egrid1():
    return grid_for(PROB, ((Fraction(2, 5), Fraction(3, 5)),), 1, exact=True)


def vals_max(F):
    return max((max(abs(complex(x)) for x in v) for v in F.terms.values()),
               default=0.0)


# -- momentum -------------------------------------------------------------------

def test_momentum_fourier_only():
    assert momentum((3, -1), (), (), PROB) == (-1, 0)


def test_momentum_diagonal_term():
    site = (2, 1)
    assert momentum((0, 0), ((site, 1),), ((site, 1),), PROB) == (0, 0)


def test_momentum_zero_sum_quartic():
    # m1 - m2 + m3 - m4 = 0
    alpha = (((2, 1), 1), ((4, 2), 1))
    beta = (((3, 1), 1), ((3, 2), 1))
    assert momentum((0, 0), alpha, beta, PROB) == (0, 0)


def test_series_builder_rejects_momentum_violation():
    g = grid1()
    bad = mono(k=(0, 1), alpha=(((2, 1), 1),), b=2)
    with pytest.raises(ValueError):
        series([(bad, 1.0)], g, momentum_flag=True, problem=PROB)


def test_series_builder_accumulates_and_drops_zeros():
    g = grid1()
    m = mono(k=(1, 0), b=2)
    F = series([(m, 2.0), (m, -2.0)], g)
    assert F.is_zero()
    G = series([(m, 2.0), (m, 3.0)], g)
    assert G.terms[m] == ((5 + 0j),)


# -- norms ----------------------------------------------------------------------

def test_majorant_norm_diagonal_quadratic_closed_form():
    n = (2, 1)
    g = grid1()
    F = series([(mono(alpha=((n, 1),), beta=((n, 1),), b=2), 1.0)], g)
    nn = math.sqrt(5.0)
    expected = (R * math.exp(-RHO * nn) * nn ** (-(PROB.d + 1))) ** 2
    assert majorant_norm(F, R, S, RHO, PROB) == pytest.approx(expected,
                                                              rel=1e-12)


def test_majorant_norm_pure_fourier():
    g = grid1()
    F = series([(mono(k=(3, -1), b=2), 1.0)], g)
    assert majorant_norm(F, R, S, RHO, PROB) == pytest.approx(
        math.exp(4 * S), rel=1e-12)


def test_majorant_norm_zero_and_homogeneous():
    g = grid1()
    assert majorant_norm(zero_series(g), R, S, RHO, PROB) == 0.0
    F = series([(mono(k=(1, 0), b=2), 1.5),
                (mono(l=(1, 0), b=2), -0.5)], g)
    n1 = majorant_norm(F, R, S, RHO, PROB)
    n3 = majorant_norm(series_scale(F, -3.0), R, S, RHO, PROB)
    assert n3 == pytest.approx(3 * n1, rel=1e-12)


def test_majorant_norm_monotone_under_term_removal():
    g = grid1()
    m1, m2 = mono(k=(1, 0), b=2), mono(k=(0, 2), b=2)
    F = series([(m1, 1.0), (m2, 0.7)], g)
    assert majorant_norm(project(F, lambda m: m == m1), R, S, RHO, PROB) \
        <= majorant_norm(F, R, S, RHO, PROB)


def test_majorant_norm_domain_errors():
    g = grid1()
    F = series([(mono(k=(1, 0), b=2), 1.0)], g)
    with pytest.raises(ValueError):
        majorant_norm(F, 0.0, S, RHO, PROB)
    with pytest.raises(ValueError):
        majorant_norm(F, R, -1.0, RHO, PROB)


def test_vector_field_norm_action_and_zero():
    g = grid1()
    assert vector_field_norm(series([(mono(l=(1, 0), b=2), 1.0)], g),
                             R, S, RHO, PROB) == pytest.approx(1.0)
    assert vector_field_norm(zero_series(g), R, S, RHO, PROB) == 0.0


def test_vector_field_norm_diagonal_quadratic():
    # both z-derivatives contribute w_n * (r / w_n) / r = 1
    g = grid1()
    n = (2, 1)
    F = series([(mono(alpha=((n, 1),), beta=((n, 1),), b=2), 1.0)], g)
    assert vector_field_norm(F, R, S, RHO, PROB) == pytest.approx(2.0,
                                                                  rel=1e-12)


def test_coeff_c1_linear_exact():
    # central and one-sided differences are exact on affine data
    g = grid_for(PROB, ((0.4, 0.6),), 3)
    vals = tuple(2.0 + 3.0 * x - y for (x, y) in g.points())
    assert coeff_c1(vals, g) == pytest.approx(3.4 + 4.0, rel=1e-12)


# -- projections ----------------------------------------------------------------

def catalog_series(grid, seed, momentum_ok=False):
    rng = random.Random(seed)
    if momentum_ok:
        monos = [mono(l=(1, 0), b=2), mono(l=(0, 1), b=2),
                 mono(k=(0, 1), alpha=(((2, 1), 1),), beta=(((3, 1), 1),),
                      b=2),
                 mono(k=(0, -1), alpha=(((3, 1), 1),), beta=(((2, 1), 1),),
                      b=2),
                 mono(alpha=(((0, 2), 1),), beta=(((0, 2), 1),), b=2),
                 mono(k=(2, -2), alpha=(((2, 2), 1),), beta=(((0, 2), 1),),
                      b=2)]
    else:
        monos = [mono(k=(1, 0), b=2), mono(k=(0, 2), l=(1, 0), b=2),
                 mono(l=(0, 1), b=2),
                 mono(k=(1, 1), alpha=(((2, 0), 1),), b=2),
                 mono(beta=(((0, 1), 2),), b=2),
                 mono(alpha=(((2, 0), 1), ((0, 1), 1)), b=2),
                 mono(k=(-1, 0), alpha=(((2, 0), 1),), beta=(((0, 1), 1),),
                      b=2)]
    entries = [(m, complex(rng.uniform(-1, 1), rng.uniform(-1, 1)))
               for m in rng.sample(monos, 4)]
    return series(entries, grid, momentum_flag=momentum_ok,
                  problem=PROB if momentum_ok else None)


def test_project_partition_and_idempotence():
    F = catalog_series(grid1(), seed=5)
    pred = pred_degree_le(1)
    a = project(F, pred)
    bpart = project(F, lambda m: not pred(m))
    assert series_sub(series_add(a, bpart), F).is_zero()
    assert project(a, pred).terms == a.terms


def test_project_disjoint_bands_annihilate():
    F = catalog_series(grid1(), seed=6)
    assert project(project(F, pred_k_lt(2)), pred_k_ge(2)).is_zero()


def test_project_contracts_both_norms():
    F = catalog_series(grid1(), seed=7)
    G = project(F, pred_k_lt(2))
    assert majorant_norm(G, R, S, RHO, PROB) <= majorant_norm(
        F, R, S, RHO, PROB) + 1e-15
    assert vector_field_norm(G, R, S, RHO, PROB) <= vector_field_norm(
        F, R, S, RHO, PROB) + 1e-15


# -- Poisson bracket ------------------------------------------------------------

def test_bracket_action_angle_pair():
    g = grid1()
    I1 = series([(mono(l=(1, 0), b=2), 1.0)], g)
    E1 = series([(mono(k=(1, 0), b=2), 1.0)], g)
    B = poisson_bracket(I1, E1)
    assert set(B.terms) == {mono(k=(1, 0), b=2)}
    assert B.terms[mono(k=(1, 0), b=2)] == ((1j),)


def test_bracket_normal_form_eigenvalue():
    # {N, e^(i k.theta) z_m zbar_n} = i(<k,omega> + Om_m - Om_n) * same
    g = grid1()
    omega = (0.68, 1.28)
    m_site, n_site = (2, 0), (0, 3)
    om_m, om_n = 4.0, 9.0
    N = series([(mono(l=(1, 0), b=2), omega[0]),
                (mono(l=(0, 1), b=2), omega[1]),
                (mono(alpha=((m_site, 1),), beta=((m_site, 1),), b=2), om_m),
                (mono(alpha=((n_site, 1),), beta=((n_site, 1),), b=2), om_n)],
               g)
    k = (1, -1)
    probe = mono(k=k, alpha=((m_site, 1),), beta=((n_site, 1),), b=2)
    B = poisson_bracket(N, series([(probe, 1.0)], g))
    eig = 1j * (omega[0] - omega[1] + om_m - om_n)
    assert set(B.terms) == {probe}
    assert B.terms[probe][0] == pytest.approx(eig, rel=1e-14)


def test_bracket_antisymmetry_exact():
    g = egrid1()
    F = series([(mono(k=(1, 0), b=2), Fraction(2, 3)),
                (mono(l=(0, 1), alpha=(((2, 0), 1),), b=2), Fraction(1, 7))],
               g, mode="exact")
    G = series([(mono(k=(0, 1), l=(1, 0), b=2), Fraction(5, 2)),
                (mono(beta=(((2, 0), 1),), b=2), GaussRat(0, 1))],
               g, mode="exact")
    assert series_add(poisson_bracket(F, G), poisson_bracket(G, F)).is_zero()


def test_bracket_self_momentum_series():
    # first component of the momentum observable commutes with itself
    g = egrid1()
    M1 = series([(mono(l=(0, 1), b=2), 1),
                 (mono(alpha=(((2, 1), 1),), beta=(((2, 1), 1),), b=2), 2),
                 (mono(alpha=(((-3, 2), 1),), beta=(((-3, 2), 1),), b=2), -3)],
                g, mode="exact")
    assert poisson_bracket(M1, M1).is_zero()


def test_bracket_jacobi_exact():
    g = egrid1()
    F = series([(mono(k=(1, 0), l=(0, 1), b=2), Fraction(1, 2)),
                (mono(alpha=(((2, 0), 1),), beta=(((0, 1), 1),), k=(1, -1),
                      b=2), Fraction(3, 5))], g, mode="exact")
    G = series([(mono(k=(-1, 1), b=2), GaussRat(Fraction(1, 3), 1)),
                (mono(alpha=(((0, 1), 1),), beta=(((2, 0), 1),), k=(-1, 1),
                      b=2), Fraction(7, 4))], g, mode="exact")
    H = series([(mono(l=(1, 0), b=2), Fraction(2, 9)),
                (mono(alpha=(((2, 0), 1),), beta=(((2, 0), 1),), b=2),
                 Fraction(1, 6))], g, mode="exact")
    total = series_add(poisson_bracket(F, poisson_bracket(G, H)),
                       series_add(
                           poisson_bracket(G, poisson_bracket(H, F)),
                           poisson_bracket(H, poisson_bracket(F, G))))
    assert total.is_zero()


def test_bracket_jacobi_float():
    g = grid1()
    F = catalog_series(g, seed=11)
    G = catalog_series(g, seed=12)
    H = catalog_series(g, seed=13)
    total = series_add(poisson_bracket(F, poisson_bracket(G, H)),
                       series_add(
                           poisson_bracket(G, poisson_bracket(H, F)),
                           poisson_bracket(H, poisson_bracket(F, G))))
    assert vals_max(total) <= 1e-12


def test_bracket_leibniz_exact():
    g = egrid1()
    F = series([(mono(k=(1, 0), l=(0, 1), b=2), Fraction(1, 2)),
                (mono(alpha=(((2, 0), 1),), b=2), Fraction(1, 3))],
               g, mode="exact")
    G = series([(mono(k=(0, 1), b=2), Fraction(4, 7)),
                (mono(beta=(((2, 0), 1),), b=2), Fraction(5, 6))],
               g, mode="exact")
    H = series([(mono(l=(1, 0), b=2), Fraction(9, 8)),
                (mono(k=(-1, 0), b=2), GaussRat(0, Fraction(1, 5)))],
               g, mode="exact")
    lhs = poisson_bracket(F, series_mul(G, H))
    rhs = series_add(series_mul(poisson_bracket(F, G), H),
                     series_mul(G, poisson_bracket(F, H)))
    assert series_sub(lhs, rhs).is_zero()


def test_bracket_preserves_momentum_conservation():
    g = grid1()
    F = catalog_series(g, seed=21, momentum_ok=True)
    G = catalog_series(g, seed=22, momentum_ok=True)
    B = poisson_bracket(F, G)
    assert B.momentum_flag
    for m in B.terms:
        assert mono_momentum(m, PROB) == (0, 0)


def test_bracket_truncation_records_dropped_mass():
    g = grid1()
    F = series([(mono(k=(2, 0), b=2), 1.0)], g)
    G = series([(mono(k=(2, 0), l=(1, 0), b=2), 1.0)], g)
    B = poisson_bracket(F, G, trunc=(4, 3))
    assert B.is_zero()
    assert B.dropped > 0


# -- split bracket ---------------------------------------------------------------

def test_split_bracket_parts_sum_to_whole():
    g = grid1()
    cls = SiteClassifier(N=2, tau1=Fraction(17))
    high = (70000, 1)
    rest = (100, 3)
    F = series([(mono(k=(1, 0), l=(0, 1), b=2), 0.7),
                (mono(alpha=((high, 1),), beta=((rest, 1),), b=2), 1.2),
                (mono(alpha=(((2, 0), 1),), b=2), -0.4)], g)
    G = series([(mono(k=(0, 1), l=(1, 0), b=2), 0.9),
                (mono(beta=((high, 1),), alpha=((rest, 1),), b=2), 0.3),
                (mono(beta=(((2, 0), 1),), b=2), 1.1)], g)
    full = poisson_bracket(F, G)
    parts = [split_bracket(F, G, cls, p) for p in ("Itheta", "L", "H", "R")]
    acc = parts[0]
    for p in parts[1:]:
        acc = series_add(acc, p)
    assert vals_max(series_sub(acc, full)) <= 1e-15


def test_split_bracket_high_transfer_term():
    g = grid1()
    cls = SiteClassifier(N=2, tau1=Fraction(17))
    m_site, n_site, p_site = (2, 0), (70000, 1), (0, 1)
    F = series([(mono(alpha=((m_site, 1),), beta=((n_site, 1),), b=2), 1.0)],
               g)
    G = series([(mono(alpha=((n_site, 1),), beta=((p_site, 1),), b=2), 1.0)],
               g)
    B = split_bracket(F, G, cls, "H")
    want = mono(alpha=((m_site, 1),), beta=((p_site, 1),), b=2)
    assert set(B.terms) == {want}
    assert B.terms[want][0] == pytest.approx(1j)
    assert split_bracket(F, G, cls, "L").is_zero()


def test_split_bracket_no_action_angle_dependence():
    g = grid1()
    cls = SiteClassifier(N=2, tau1=Fraction(17))
    F = series([(mono(alpha=(((2, 0), 1),), b=2), 1.0)], g)
    G = series([(mono(beta=(((0, 1), 1),), b=2), 1.0)], g)
    assert split_bracket(F, G, cls, "Itheta").is_zero()


# -- Lie transform ----------------------------------------------------------------

def test_lie_transform_identity_at_zero_generator():
    g = grid1()
    H = catalog_series(g, seed=31)
    out, mass = lie_transform(zero_series(g), H, 4)
    assert out.terms == H.terms
    assert mass == 0.0


def test_lie_transform_first_order():
    # {eps e^(i theta_1), I_1} = -i eps e^(i theta_1): antisymmetric
    # partner of the {I_1, e^(i theta_1)} = +i e^(i theta_1) convention
    g = grid1()
    eps = 0.01
    F = series([(mono(k=(1, 0), b=2), eps)], g)
    H = series([(mono(l=(1, 0), b=2), 1.0)], g)
    out, _ = lie_transform(F, H, 1)
    assert out.terms[mono(l=(1, 0), b=2)] == ((1 + 0j),)
    assert out.terms[mono(k=(1, 0), b=2)][0] == pytest.approx(-1j * eps)


# -- analytic checks ---------------------------------------------------------------

def test_cauchy_inequality_zero_and_closed_form():
    g = grid1()
    z = zero_series(g)
    rep = cauchy_check(z, z, R, S, R / 2, S / 2, RHO, PROB)
    assert rep["ok"] and rep["lhs"] == 0.0
    F = series([(mono(l=(1, 0), b=2), 1.0)], g)
    G = series([(mono(k=(1, 0), b=2), 1.0)], g)
    rep = cauchy_check(F, G, R, S, R / 2, S / 2, RHO, PROB)
    assert rep["ok"] and rep["lhs"] <= rep["rhs"]


def test_cauchy_inequality_random_pairs():
    g = grid1()
    for seed in range(40, 46):
        F = catalog_series(g, seed=seed)
        G = catalog_series(g, seed=seed + 100)
        rep = cauchy_check(F, G, R, S, 0.07, 1.5, RHO, PROB)
        assert rep["ok"], rep


def test_cauchy_domain_validation():
    g = grid1()
    z = zero_series(g)
    with pytest.raises(ValueError):
        cauchy_check(z, z, R, S, R, S / 2, RHO, PROB)


def test_reality_violation():
    g = grid1()
    real = series([(mono(k=(1, 0), b=2), 0.5), (mono(k=(-1, 0), b=2), 0.5),
                   (mono(alpha=(((2, 0), 1),), beta=(((2, 0), 1),), b=2),
                    2.0)], g)
    assert reality_violation(real) == 0.0
    skew = series([(mono(k=(1, 0), b=2), 1j)], g)
    assert reality_violation(skew) > 0


# -- serialization ------------------------------------------------------------------

def test_series_roundtrip_bit_exact(tmp_path):
    g = grid_for(PROB, ((0.4, 0.6),), 3)
    rng = random.Random(99)
    entries = []
    for m in [mono(k=(1, -2), l=(0, 1), b=2),
              mono(alpha=(((2, 0), 1), ((0, 1), 2)), b=2),
              mono(k=(0, 3), beta=(((-1, 2), 1),), b=2)]:
        vals = tuple(complex(rng.uniform(-1, 1), rng.uniform(-1, 1))
                     for _ in range(g.size))
        entries.append((m, vals))
    F = series(entries, g)
    path = tmp_path / "series.jsonl"
    save_series(F, path, problem=PROB)
    G = load_series(path)
    assert G.terms == F.terms
    assert G.grid.box == F.grid.box and G.grid.npts == F.grid.npts
    save_series(G, tmp_path / "series2.jsonl", problem=PROB)
    assert (tmp_path / "series2.jsonl").read_bytes() == path.read_bytes()
