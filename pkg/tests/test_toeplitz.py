import math
from fractions import Fraction

import pytest

from qtkam.params import CutParams, LatticeParams, Problem
from qtkam.series import (grid_for, mono, poisson_bracket, series, series_sub,
                          vector_field_norm, zero_series)
from qtkam.toeplitz import (bracket_closure_bound, classify_bilinear,
                            diagonal_decompose, is_high_site,
                            low_momentum_pred, project_bilinear,
                            quasi_toeplitz_norm, splitting_check,
                            splitting_preconditions, toeplitz_fit,
                            weighted_low_degree)

PROB = Problem(d=2, b=2, sites=((0, 0), (1, 0)))
LP = LatticeParams(tau0=2, tau1=17, c=Fraction(1, 2), C=4, N0=2,
                   mode="desk", gap=1)
CP = CutParams(N=2, theta=Fraction(3, 5), mu=Fraction(39, 10), tau=2)
R, S, RHO = 0.1, 2.0, 1.0

# theta * N^tau1 = 0.6 * 2^17 = 78643.2; the line y=1 beyond that
H = 78644


def grid1(exact=False):
    box = ((Fraction(2, 5), Fraction(3, 5)),)
    return grid_for(PROB, box, 1, exact=exact)


def diag_mono(site):
    return mono(alpha=((site, 1),), beta=((site, 1),), b=2)


def vals_max(F):
    return max((max(abs(complex(x)) for x in v) for v in F.terms.values()),
               default=0.0)


# -- site classification -----------------------------------------------------

def test_high_site_threshold_is_exact():
    assert is_high_site((H, 1), CP.theta, CP.N, LP.tau1)
    assert is_high_site((H, 0), CP.theta, CP.N, LP.tau1)
    # 78643^2 + 1 < 78643.2^2: just inside the ball
    assert not is_high_site((78643, 1), CP.theta, CP.N, LP.tau1)


def test_weighted_low_degree_counts_multiplicity():
    alpha = (((3, 4), 2),)
    beta = (((3, 4), 1),)
    assert weighted_low_degree(alpha, beta) == pytest.approx(15.0)


def test_low_momentum_predicate():
    pred = low_momentum_pred(CP.N, CP.mu)
    assert pred(mono(k=(1, 0), alpha=(((3, 4), 1),), b=2))
    assert not pred(mono(k=(2, 0), b=2))
    assert not pred(mono(alpha=(((30, 5), 2),), b=2))


# -- bilinear projection -------------------------------------------------------

def test_project_diagonal_quadratic_keeps_cut_sites():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0),
                (diag_mono((H + 7, 1)), 2.5),
                (diag_mono((5, 2)), 9.0)],
               g, momentum_flag=True, problem=PROB)
    P = project_bilinear(Q, CP, PROB, LP)
    assert set(P.terms) == {diag_mono((H, 1)), diag_mono((H + 7, 1))}


def test_project_drops_large_fourier_index():
    g = grid1()
    m = mono(k=(2, 0), alpha=(((H, 1), 1),), beta=(((H + 2, 1), 1),), b=2)
    # pi = (2,0)*0 + (H,1) - (H+2,1) = (-2, 0) needs k2 = 2 to cancel
    m = mono(k=(0, 2), alpha=(((H, 1), 1),), beta=(((H + 2, 1), 1),), b=2)
    F = series([(m, 1.0)], g, momentum_flag=True, problem=PROB)
    assert project_bilinear(F, CP, PROB, LP).is_zero()
    assert classify_bilinear(m, CP, PROB, LP) is None


def test_project_idempotent_and_contractive():
    g = grid1()
    F = series([(diag_mono((H, 1)), 2.0),
                (diag_mono((H + 7, 1)), -1.5),
                (mono(k=(0, 1), alpha=(((H + 1, 1), 1),),
                      beta=(((H + 2, 1), 1),), b=2), 0.7),
                (mono(l=(1, 0), b=2), 3.0)],
               g, momentum_flag=True, problem=PROB)
    P1 = project_bilinear(F, CP, PROB, LP)
    P2 = project_bilinear(P1, CP, PROB, LP)
    assert P1.terms == P2.terms
    assert vector_field_norm(P1, R, S, RHO, PROB) <= vector_field_norm(
        F, R, S, RHO, PROB) + 1e-15


def test_band_separation_precondition():
    lp_bad = LatticeParams(tau0=2, tau1=5, c=Fraction(1, 2), C=4, N0=2,
                           mode="desk", gap=1)
    g = grid1()
    with pytest.raises(ValueError):
        project_bilinear(zero_series(g), CutParams(N=2, theta=Fraction(3, 5),
                                                   mu=2, tau=2), PROB, lp_bad)


# -- piecewise fit ----------------------------------------------------------------

def test_fit_constant_class_has_zero_error():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.0)],
               g, momentum_flag=True, problem=PROB)
    dec = toeplitz_fit(Q, CP, PROB, LP)
    assert len(dec.toeplitz_part.classes) == 1
    assert dec.error_part.is_zero()


def test_fit_representative_and_scaled_error():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.5)],
               g, momentum_flag=True, problem=PROB)
    dec = toeplitz_fit(Q, CP, PROB, LP)
    (cls,) = dec.toeplitz_part.classes.values()
    assert cls.representative == ((H, 1), (H, 1))
    assert cls.h == (0, 0)
    assert cls.coeff == ((2 + 0j),)
    # scale = N^(gap tau) = 4, error = 4 * (2.5 - 2.0) on the non-rep term
    assert dec.scale == 4
    assert dec.error_part.terms[diag_mono((H + 7, 1))] == ((2 + 0j),)


def test_fit_reconstruction_identity():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.5),
                (mono(k=(0, 1), alpha=(((H + 1, 1), 1),),
                      beta=(((H + 2, 1), 1),), b=2), 0.7),
                (mono(k=(0, 1), alpha=(((H + 3, 1), 1),),
                      beta=(((H + 4, 1), 1),), b=2), 0.9)],
               g, momentum_flag=True, problem=PROB)
    dec = toeplitz_fit(Q, CP, PROB, LP)
    resid = series_sub(dec.reconstruct(), dec.projection)
    assert vals_max(resid) == 0.0


def test_fit_translation_invariance():
    # same h, same subspace, same low data: one class, one coefficient
    g = grid1()
    m1 = mono(k=(0, 1), alpha=(((H + 1, 1), 1),), beta=(((H + 2, 1), 1),),
              b=2)
    m2 = mono(k=(0, 1), alpha=(((H + 3, 1), 1),), beta=(((H + 4, 1), 1),),
              b=2)
    F = series([(m1, 0.7), (m2, 0.9)], g, momentum_flag=True, problem=PROB)
    dec = toeplitz_fit(F, CP, PROB, LP)
    assert len(dec.toeplitz_part.classes) == 1
    (cls,) = dec.toeplitz_part.classes.values()
    assert cls.h == (-1, 0)
    ts = dec.toeplitz_series()
    assert ts.terms[m1] == ts.terms[m2] == ((0.7 + 0j),)


def test_fit_empty_projection():
    g = grid1()
    F = series([(mono(l=(1, 0), b=2), 1.0)], g, momentum_flag=True,
               problem=PROB)
    dec = toeplitz_fit(F, CP, PROB, LP)
    assert dec.projection.is_zero() and dec.error_part.is_zero()
    assert not dec.toeplitz_part.classes


def test_fit_export_table():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.5)],
               g, momentum_flag=True, problem=PROB)
    table = toeplitz_fit(Q, CP, PROB, LP).export()
    assert table["N"] == 2 and table["gap"] == 1
    (row,) = table["classes"]
    assert row["members"] == 2 and row["h"] == [0, 0]


# -- the finite-grid norm -----------------------------------------------------------

def test_qt_norm_equals_base_norm_on_toeplitz_input():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.0)],
               g, momentum_flag=True, problem=PROB)
    base = vector_field_norm(Q, R, S, RHO, PROB)
    rep = {}
    val = quasi_toeplitz_norm(Q, 2, CP.theta, CP.mu, [2], [Fraction(2)],
                              R, S, RHO, PROB, LP, report=rep)
    assert val == base
    assert rep["surrogate"] is True
    assert rep["largest_nonempty_N"] == 2


def test_qt_norm_zero_series():
    assert quasi_toeplitz_norm(zero_series(grid1()), 2, CP.theta, CP.mu,
                               [2], [Fraction(2)], R, S, RHO, PROB, LP) == 0.0


def test_qt_norm_dominates_base_norm():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.5)],
               g, momentum_flag=True, problem=PROB)
    base = vector_field_norm(Q, R, S, RHO, PROB)
    val = quasi_toeplitz_norm(Q, 2, CP.theta, CP.mu, [2], [Fraction(2)],
                              R, S, RHO, PROB, LP)
    assert val >= base


def test_qt_norm_grid_validation():
    g = grid1()
    z = zero_series(g)
    with pytest.raises(ValueError):
        quasi_toeplitz_norm(z, 2, CP.theta, CP.mu, [], [Fraction(2)],
                            R, S, RHO, PROB, LP)
    with pytest.raises(ValueError):
        quasi_toeplitz_norm(z, 3, CP.theta, CP.mu, [2], [Fraction(2)],
                            R, S, RHO, PROB, LP)
    with pytest.raises(ValueError):
        quasi_toeplitz_norm(z, 2, CP.theta, CP.mu, [2], [Fraction(1)],
                            R, S, RHO, PROB, LP)


# -- diagonal decomposition ----------------------------------------------------------

def test_diagonal_decompose_constant_class():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.0)],
               g, momentum_flag=True, problem=PROB)
    qhat, qbar = diagonal_decompose(Q, CP, PROB, LP)
    (vals,) = qhat.values()
    assert vals == ((2 + 0j),)
    assert all(v == (0j,) for v in qbar.values())


def test_diagonal_decompose_recovers_constructed_split():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.5),
                (diag_mono((5, 2)), 9.0)],
               g, momentum_flag=True, problem=PROB)
    qhat, qbar = diagonal_decompose(Q, CP, PROB, LP)
    (A,) = qhat.keys()
    assert qhat[A] == ((2 + 0j),)
    assert qbar[(H, 1)] == (0j,)
    assert qbar[(H + 7, 1)] == ((2 + 0j),)
    # Q_m = qhat + qbar / scale with scale = 4
    assert 2.0 + 2.0 / 4 == 2.5
    assert (5, 2) not in qbar


def test_diagonal_decompose_rejects_nondiagonal():
    g = grid1()
    F = series([(mono(k=(0, 1), alpha=(((H, 1), 1),),
                      beta=(((H + 1, 1), 1),), b=2), 1.0)],
               g, momentum_flag=True, problem=PROB)
    with pytest.raises(ValueError):
        diagonal_decompose(F, CP, PROB, LP)


def test_diagonal_decompose_bound_check():
    g = grid1()
    Q = series([(diag_mono((H, 1)), 2.0), (diag_mono((H + 7, 1)), 2.5)],
               g, momentum_flag=True, problem=PROB)
    qt = quasi_toeplitz_norm(Q, 2, CP.theta, CP.mu, [2], [Fraction(2)],
                             R, S, RHO, PROB, LP)
    qhat, qbar = diagonal_decompose(Q, CP, PROB, LP, qt_bound=qt)
    for vals in list(qhat.values()) + list(qbar.values()):
        assert max(abs(v) for v in vals) <= 2 * qt + 1e-9
    with pytest.raises(ValueError):
        diagonal_decompose(Q, CP, PROB, LP, qt_bound=1e-6)


# -- bracket splitting identity --------------------------------------------------------

CPS = CutParams(N=3, theta=Fraction(3, 5), mu=2, tau=2)
CPPS = CutParams(N=3, theta=Fraction(5, 2), mu=Fraction(1, 10), tau=2)
# theta' * N^tau1 = 2.5 * 3^17 = 322687397.5
G_HIGH = 322687398


def test_splitting_preconditions_hold_and_fail():
    assert splitting_preconditions(CPS, CPPS, PROB, LP) == []
    bad = splitting_preconditions(CPS, CutParams(N=4, theta=Fraction(5, 2),
                                                 mu=Fraction(1, 10), tau=2),
                                  PROB, LP)
    assert bad
    loose = splitting_preconditions(CPS, CutParams(N=3, theta=Fraction(1, 2),
                                                   mu=3, tau=2), PROB, LP)
    assert loose


def test_splitting_identity_bilinear_pair_exact():
    g = grid1(exact=True)
    f1 = series([(mono(k=(0, 1), alpha=(((G_HIGH, 1), 1),),
                       beta=(((G_HIGH + 1, 1), 1),), b=2), Fraction(3, 2))],
                g, momentum_flag=True, mode="exact", problem=PROB)
    f2 = series([(mono(k=(0, -1), alpha=(((G_HIGH + 1, 1), 1),),
                       beta=(((G_HIGH, 1), 1),), b=2), Fraction(2, 3))],
                g, momentum_flag=True, mode="exact", problem=PROB)
    res = splitting_check(f1, f2, CPS, CPPS, (6, 12), PROB, LP)
    assert res.is_zero()


def test_splitting_identity_mixed_low_exact():
    g = grid1(exact=True)
    f1 = series([(mono(k=(0, 1), alpha=(((G_HIGH, 1), 1),),
                       beta=(((G_HIGH + 1, 1), 1),), b=2), Fraction(3, 2))],
                g, momentum_flag=True, mode="exact", problem=PROB)
    f2 = series([(mono(l=(1, 0), b=2), Fraction(1, 4)),
                 (mono(k=(1, 0), l=(0, 1), b=2), Fraction(1, 7)),
                 (mono(k=(0, 1), alpha=(((2, 1), 1),), beta=(((3, 1), 1),),
                       b=2), Fraction(5, 9))],
                g, momentum_flag=True, mode="exact", problem=PROB)
    assert splitting_check(f1, f2, CPS, CPPS, (6, 12), PROB, LP).is_zero()
    assert splitting_check(f2, f1, CPS, CPPS, (6, 12), PROB, LP).is_zero()


def test_splitting_zero_inputs():
    g = grid1(exact=True)
    z = zero_series(g, momentum_flag=True, mode="exact")
    assert splitting_check(z, z, CPS, CPPS, (6, 12), PROB, LP).is_zero()


def test_splitting_rejects_bad_parameters():
    g = grid1(exact=True)
    z = zero_series(g, momentum_flag=True, mode="exact")
    with pytest.raises(ValueError):
        splitting_check(z, z, CPS, CutParams(N=3, theta=Fraction(1, 2),
                                             mu=3, tau=2), (6, 12), PROB, LP)


# -- closure bounds ----------------------------------------------------------------

def test_bracket_closure_bound_on_instance():
    g = grid1()
    f1 = series([(diag_mono((H, 1)), 0.4), (diag_mono((H + 7, 1)), 0.5),
                 (mono(k=(1, 0), l=(0, 1), b=2), 0.2)],
                g, momentum_flag=True, problem=PROB)
    f2 = series([(mono(k=(0, 1), alpha=(((H + 1, 1), 1),),
                       beta=(((H + 2, 1), 1),), b=2), 0.3),
                 (mono(l=(1, 0), b=2), 0.1)],
                g, momentum_flag=True, problem=PROB)
    t1 = quasi_toeplitz_norm(f1, 2, CP.theta, CP.mu, [2], [Fraction(2)],
                             R, S, RHO, PROB, LP)
    t2 = quasi_toeplitz_norm(f2, 2, CP.theta, CP.mu, [2], [Fraction(2)],
                             R, S, RHO, PROB, LP)
    r2, s2 = 0.07, 1.5
    t12 = quasi_toeplitz_norm(poisson_bracket(f1, f2), 2, CP.theta, CP.mu,
                              [2], [Fraction(2)], r2, s2, RHO, PROB, LP)
    bound = bracket_closure_bound(t1, t2, R, S, r2, s2, PROB.d)
    assert t12 <= bound
