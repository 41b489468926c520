import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoharnack.degiorgi import (
    DEFAULT_EXPONENTS,
    ExponentError,
    NestedWeights,
    TRACE_COLUMNS,
    check_exponents,
    compose_transform,
    energy_estimate,
    exponent_conditions,
    fit_sup_constants,
    gain_integrability,
    interpolation_check,
    interpolation_theta,
    l1_interpolation,
    series_converges,
    series_terms,
    supremum_bound,
    truncation_eval,
)
from hypoharnack.geometry import Cylinder, PhasePoint
from hypoharnack.grid import Grid, cylinder_weights
from hypoharnack.kolmogorov import truncated_bump_solution
from hypoharnack.rough_solver import evolve, make_coefficients
from hypoharnack.transforms import SmoothedTruncation

SUP_GRID = Grid(-1.0, 0.0, 32, 3.0, 33, 3.0, 33)
BASE = PhasePoint.origin()
INNER = Cylinder(BASE, 0.25, 0.5)
OUTER = Cylinder(BASE, 0.5, 1.0)


def bump_subsolution(grid, coeffs, width=0.5):
    X, V = np.meshgrid(grid.x, grid.v, indexing="ij")
    return evolve(coeffs, np.exp(-(X**2 + V**2) / width**2), boundary=np.zeros(grid.shape)).values


# --- exponents ------------------------------------------------------------------


def test_default_exponents_pass():
    assert check_exponents({}) == {k: float(v) for k, v in DEFAULT_EXPONENTS.items()}


def test_condition_sides_for_defaults():
    rows = exponent_conditions(DEFAULT_EXPONENTS)
    # right sides evaluated by hand for p0 = 9/4, gamma0 = gamma1 = 2
    expected_rhs = [0.0, 1 / 36, 0.0, 1 / 18]
    expected_lhs = [0.0, 1 / 40, 0.0, 1 / 20]
    assert [r["rhs"] for r in rows] == pytest.approx(expected_rhs, abs=1e-15)
    assert [r["lhs"] for r in rows] == pytest.approx(expected_lhs)
    assert all(r["ok"] for r in rows)


@pytest.mark.parametrize(
    "override,needle",
    [
        ({"q_Lam": 10.0}, "1/q_Lam"),
        ({"q_b": 10.0}, "1/q_b"),
        ({"q_c": 4.0}, "1/q_c"),
        ({"q_d": 5.0}, "1/q_d"),
        ({"p0": 2.6}, "p0 < p1"),
        ({"gamma0": 2.5}, "gamma0"),
    ],
)
def test_exponent_violations_are_named(override, needle):
    with pytest.raises(ExponentError, match=needle):
        check_exponents(override)


def test_sup_bound_rejects_bad_exponents():
    c = make_coefficients({}, SUP_GRID)
    with pytest.raises(ExponentError, match="1/q_Lam"):
        supremum_bound(np.zeros(SUP_GRID.shape), c, INNER, OUTER, exponents={"q_Lam": 10.0})


# --- truncation -------------------------------------------------------------------


def test_truncation_eval_examples():
    T = SmoothedTruncation(0.1, 0.5)
    assert [float(x) for x in truncation_eval(T, 0.3)] == [0.0, 0.0, 0.0]
    k, k1, k2 = (float(x) for x in truncation_eval(T, 0.7))
    assert (k, k1, k2) == pytest.approx((0.2, 1.0, 0.0))
    assert float(truncation_eval(T, 0.5)[2]) == pytest.approx(9.375)


# --- quadrature -------------------------------------------------------------------


@pytest.mark.parametrize("s,r", [(0.5, 1.0), (0.3, 0.7), (0.26, 0.51)])
def test_nested_weights_match_global_quadrature(s, r):
    nw = NestedWeights(SUP_GRID, OUTER)
    direct = cylinder_weights(SUP_GRID, Cylinder(BASE, s, r))
    assert np.allclose(nw.full(nw.weights(s, r)), direct, atol=1e-15)


def test_nested_weights_reject_larger_cylinder():
    with pytest.raises(ValueError):
        NestedWeights(SUP_GRID, OUTER).weights(0.6, 1.0)


# --- energy estimate --------------------------------------------------------------


def test_energy_zero_field():
    c = make_coefficients({}, SUP_GRID)
    rep = energy_estimate(np.zeros(SUP_GRID.shape), c, INNER, OUTER)
    assert rep.lhs == 0 and rep.rhs == 0


def test_energy_gap_sweep_slope():
    c = make_coefficients({}, SUP_GRID)
    u = bump_subsolution(SUP_GRID, c)
    comp = compose_transform(c, u, SmoothedTruncation(0.05, 0.1), mode="sub")
    gaps = np.array([0.01, 0.005, 0.0025])
    rhs = [energy_estimate(comp.v, comp.coeffs, INNER, OUTER, s1=0.25, r1=1.0 - x).rhs for x in gaps]
    slope = np.polyfit(np.log(gaps), np.log(rhs), 1)[0]
    assert slope == pytest.approx(-2.0, abs=0.2)


def test_energy_ratio_refinement_stable():
    ratios = []
    for g in (SUP_GRID, SUP_GRID.refine(2)):
        c = make_coefficients({}, g)
        u = bump_subsolution(g, c)
        comp = compose_transform(c, u, SmoothedTruncation(0.05, 0.1), mode="sub")
        rep = energy_estimate(comp.v, comp.coeffs, INNER, OUTER)
        assert rep.lhs <= rep.rhs
        ratios.append(rep.ratio)
    assert ratios[1] == pytest.approx(ratios[0], rel=0.3)


# --- gain of integrability ----------------------------------------------------------


def test_gain_truncated_away():
    c = make_coefficients({}, SUP_GRID)
    u = bump_subsolution(SUP_GRID, c)
    rep = gain_integrability(u, c, INNER, OUTER, eps=0.1, h=float(u.max()) + 0.2)
    assert rep.lhs == 0 and rep.details["w_norm"] == 0 and rep.details["C2"] == 0


def test_gain_ordering_on_checkerboard():
    c = make_coefficients({"kind": "checkerboard", "lam": 1.0, "Lam": 4.0}, SUP_GRID)
    u = bump_subsolution(SUP_GRID, c)
    rep = gain_integrability(u, c, INNER, OUTER, eps=0.05, h=0.05)
    z, w = rep.arrays["z"], rep.arrays["w"]
    assert np.all(z <= w + 1e-8)
    assert rep.passed and rep.lhs > 0


def test_gain_constant_refinement_stable():
    C2 = []
    for g in (SUP_GRID, SUP_GRID.refine(2)):
        c = make_coefficients({}, g)
        C2.append(gain_integrability(bump_subsolution(g, c), c, INNER, OUTER, eps=0.05, h=0.05).details["C2"])
    assert C2[1] == pytest.approx(C2[0], rel=0.3)


# --- interpolation ---------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    p0=st.floats(1.5, 4.0),
    extra=st.floats(0.1, 10.0),
)
def test_interpolation_inequality(seed, p0, extra):
    rng = np.random.default_rng(seed)
    vals = rng.exponential(size=200) ** 3
    wts = rng.random(200)
    lhs, rhs = interpolation_check(vals, wts, p0, p0 + extra)
    assert lhs <= rhs * (1 + 1e-12)


def test_interpolation_theta():
    assert interpolation_theta(2.25, 2.5) == pytest.approx((5 / 9) / (3 / 5))
    with pytest.raises(ValueError):
        interpolation_theta(2.5, 2.25)


def partial_sums_grow(theta, beta, n=2000):
    """Independent evaluation of the series by plain summation."""
    total, last = 0.0, None
    for i in range(1, n + 1):
        term = theta ** (i - 1) * (1 + 1 / ((1 - beta) * beta ** (i - 1))) ** (2 / (1 - theta)) if i < 300 else None
        if term is None or not math.isfinite(term):
            break
        last = term
        total += term
    return last > 1e-6 * total


@pytest.mark.parametrize("beta,expected", [(0.7, False), (0.8, False), (0.9, True)])
def test_beta_sweep_flag(beta, expected):
    theta = interpolation_theta(2.1, 50.0)
    # threshold theta^((1-theta)/2) = 0.8643 separates the cases
    assert theta ** ((1 - theta) / 2) == pytest.approx(0.8643, abs=1e-4)
    assert series_converges(theta, beta) is expected
    assert partial_sums_grow(theta, beta) is (not expected)
    terms = series_terms(theta, beta, 400)
    assert bool(terms[-1] < terms[0]) is expected


def test_defaults_need_beta_near_one():
    theta = interpolation_theta(2.25, 2.5)
    assert not series_converges(theta, 0.9)
    assert series_converges(theta, 0.998)


def test_l1_interpolation_zero_and_divergent():
    c = make_coefficients({}, SUP_GRID)
    u = bump_subsolution(SUP_GRID, c)
    rep = l1_interpolation(u, c, INNER, OUTER, eps=0.1, h=float(u.max()) + 0.5, steps=1)
    assert rep.lhs == 0 and rep.details["C3"] == 0
    bad = l1_interpolation(u, c, INNER, OUTER, eps=0.05, h=0.05, beta=0.9, steps=1)
    assert not bad.details["converges"] and math.isinf(bad.details["C3"])
    assert bad.details["offending_scale"] is not None


def test_l1_interpolation_measures_constant():
    c = make_coefficients({}, SUP_GRID)
    u = bump_subsolution(SUP_GRID, c)
    rep = l1_interpolation(u, c, INNER, OUTER, eps=0.05, h=0.05, steps=1)
    assert rep.details["converges"]
    assert 0 < rep.details["C3"] < math.inf
    assert rep.lhs <= rep.details["C3"] * rep.rhs * (1 + 1e-12)


# --- supremum bound -----------------------------------------------------------------


@pytest.fixture(scope="module")
def smooth_sup():
    c = make_coefficients({}, SUP_GRID)
    u = bump_subsolution(SUP_GRID, c, width=0.3)
    return u, c, supremum_bound(u, c, INNER, OUTER)


def test_sup_bound_zero_field():
    c = make_coefficients({}, SUP_GRID)
    res = supremum_bound(np.zeros(SUP_GRID.shape), c, INNER, OUTER)
    assert res.sup_estimate == 0.0 and res.converged


def test_sup_bound_smooth_case(smooth_sup):
    _, _, res = smooth_sup
    assert res.converged
    assert res.sup_estimate >= res.true_max
    assert res.sup_estimate <= 10 * res.true_max
    assert res.sound and res.invariants_ok


def test_sup_bound_trace_levels(smooth_sup):
    _, _, res = smooth_sup
    D = res.D
    for st_ in res.trace:
        assert st_.h == pytest.approx(D * (1 - 2.0**-st_.k))
        assert st_.eps == pytest.approx(D / 4 * 2.0**-st_.k)
        assert st_.inclusion and st_.monotone and st_.chebyshev_ok and st_.bounds_ok
        assert set(st_.bounds) == {"holder_p0_p1", "lam_v", "c_v", "f_bar", "g_bar_v", "v_l2"}


def test_sup_bound_trace_csv(smooth_sup):
    csv_text = smooth_sup[2].trace_csv()
    lines = csv_text.split("\r\n")
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == len(smooth_sup[2].trace) + 2 and lines[-1] == ""


@pytest.mark.parametrize("alpha", [0.25, 2.0, 8.0])
def test_sup_bound_scaling(smooth_sup, alpha):
    u, c, res = smooth_sup
    scaled = supremum_bound(alpha * u, c.with_data(f=alpha * np.asarray(c.f), g=alpha * np.asarray(c.g)), INNER, OUTER)
    assert scaled.sup_estimate == alpha * res.sup_estimate
    assert scaled.D == res.D


def test_sup_bound_checkerboard_sound():
    c = make_coefficients({"kind": "checkerboard", "lam": 1.0, "Lam": 4.0}, SUP_GRID)
    res = supremum_bound(bump_subsolution(SUP_GRID, c, width=0.3), c, INNER, OUTER)
    assert res.converged and res.sound and res.invariants_ok
    assert res.true_max <= res.sup_estimate <= 10 * res.true_max


def test_fit_constants():
    C_S, beta = fit_sup_constants([0.0, 1.0, 3.0], [1.0, 2.0, 4.0])
    assert beta == pytest.approx(1.0) and C_S == pytest.approx(1.0)
    C_S, beta = fit_sup_constants([0.0, 1.0], [2.0, 1.0])
    assert beta == 0.0 and C_S == 2.0
