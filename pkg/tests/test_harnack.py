import json
import math

import numpy as np
import pytest

from hypoharnack.grid import Grid, cylinder_weights
from hypoharnack.geometry import Cylinder, PhasePoint
from hypoharnack.harnack import (
    CLOSURE,
    HarnackCertificate,
    calibrate_amplitude,
    crop_centered,
    dual_gain,
    event_fraction,
    event_set,
    g_magic_gap,
    gaussian_supersolution,
    l1_gain,
    log_transform_eval,
    weak_harnack,
)
from hypoharnack.kolmogorov import solve_dual
from hypoharnack.rough_solver import compose_transform, make_coefficients
from hypoharnack.transforms import LogTransform

HGRID = Grid(-1.0, 0.0, 24, 26.0, 261, 13.0, 131)
BASE = PhasePoint.origin()


def test_log_transform_eval_examples():
    L = LogTransform(0.1)
    assert [float(x) for x in log_transform_eval(L, 1.0)] == [0.0, 0.0, 0.0]
    assert float(log_transform_eval(L, 0.0)[0]) == pytest.approx(math.log(11) + 1 / 11 - 1, abs=1e-14)


def test_g_magic_identity_on_grid():
    z = np.linspace(0.0, 1.0, 10_001)[1:]
    gap, closed = g_magic_gap(z)
    assert np.allclose(gap, closed, rtol=1e-12, atol=1e-12)
    assert np.all(gap >= 0)


@pytest.fixture(scope="module")
def smooth_case():
    coeffs = make_coefficients({}, HGRID)
    u, A = gaussian_supersolution(coeffs, 0.25)
    return coeffs, u.values


def test_gaussian_supersolution_hits_fraction(smooth_case):
    coeffs, u = smooth_case
    assert u.min() >= 0
    assert event_fraction(u, HGRID) == pytest.approx(0.25, abs=0.02)
    assert event_fraction(u, HGRID) >= 0.25 - 1e-9


def test_calibrate_rejects_zero_profile():
    with pytest.raises(ValueError):
        calibrate_amplitude(np.zeros(HGRID.shape), HGRID, 0.25)


def test_transformed_field_bounds(smooth_case):
    coeffs, u = smooth_case
    L = LogTransform(0.05)
    v = L(u)
    assert v.min() >= 0 and v.max() <= L.at_zero
    E = event_set(u, HGRID)
    assert E.any() and np.all(v[E] == 0)


def test_l1_gain_constant_field():
    coeffs = make_coefficients({}, HGRID)
    comp = compose_transform(coeffs, np.ones(HGRID.shape), LogTransform(0.1), mode="super")
    rep = l1_gain(comp, 1.5)
    assert rep.lhs == 0 and rep.passed


def test_l1_gain_delta_sweep(smooth_case):
    coeffs, u = smooth_case
    lhs, G0 = [], []
    for d in (0.2, 0.1, 0.05):
        L = LogTransform(d)
        rep = l1_gain(compose_transform(coeffs, u, L, mode="super"), 1.5, G0=L.at_zero)
        assert rep.passed
        assert rep.lhs <= rep.details["integrated_bound"]
        lhs.append(rep.lhs)
        G0.append(L.at_zero)
        CR = rep.details["C_R_term"]
    # the slice mass starts below G_delta(0) |Sigma_R|, so growth is at most (4/lam) C(R) per unit G_delta(0)
    slopes = np.diff(lhs) / np.diff(G0)
    assert np.all(slopes > 0)
    assert np.all(slopes <= 4.0 * CR)


def test_dual_gain_empty_set(smooth_case):
    coeffs, u = smooth_case
    L = LogTransform(0.1)
    comp = compose_transform(coeffs, u, L, mode="super")
    dual = solve_dual(np.zeros(HGRID.shape, bool), HGRID)
    rep = dual_gain(comp.v, dual, comp.coeffs, 1.5, G0=L.at_zero)
    assert rep.details["sup_K"] == 0
    assert rep.details["K_bound"] == 0
    assert math.isinf(rep.rhs)


def test_dual_gain_vanishing_and_bound(smooth_case):
    coeffs, u = smooth_case
    L = LogTransform(0.1)
    comp = compose_transform(coeffs, u, L, mode="super")
    dual = solve_dual(event_set(u, HGRID), HGRID)
    rep = dual_gain(comp.v, dual, comp.coeffs, 1.5, G0=L.at_zero)
    assert rep.details["vanishes_on_E"]
    assert rep.passed and rep.lhs <= rep.rhs
    ones = compose_transform(coeffs, np.ones(HGRID.shape), L, mode="super")
    assert dual_gain(ones.v, dual, ones.coeffs, 1.5).lhs == 0


def test_crop_keeps_center():
    coeffs = make_coefficients({"kind": "checkerboard", "Lam": 2.0}, HGRID)
    u = np.random.default_rng(0).random(HGRID.shape)
    c2, u2 = crop_centered(coeffs, u, 3.0, 2.0)
    g2 = c2.grid
    assert g2.nx < HGRID.nx and g2.nv < HGRID.nv
    assert g2.x[g2.nx // 2] == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(u2[:, g2.nx // 2, g2.nv // 2], u[:, HGRID.nx // 2, HGRID.nv // 2])
    assert np.array_equal(c2.full("a")[0], coeffs.full("a")[0][130 - g2.nx // 2: 131 + g2.nx // 2, 65 - g2.nv // 2: 66 + g2.nv // 2])


def test_weak_harnack_constant_one():
    coeffs = make_coefficients({}, HGRID)
    cert = weak_harnack(np.ones(HGRID.shape), coeffs, eta=0.25)
    assert cert.mu == 1.0 and cert.passed
    assert cert.eta == pytest.approx(1.0)


def test_weak_harnack_rejects_bad_input(smooth_case):
    coeffs, u = smooth_case
    with pytest.raises(ValueError, match="nonnegative"):
        weak_harnack(u - 1.0, coeffs)
    with pytest.raises(ValueError, match="measure condition"):
        weak_harnack(u, coeffs, eta=0.5)


@pytest.fixture(scope="module")
def smooth_certificate(smooth_case):
    coeffs, u = smooth_case
    return weak_harnack(u, coeffs, eta=0.25)


def test_weak_harnack_smooth_case(smooth_certificate, smooth_case):
    cert = smooth_certificate
    _, u = smooth_case
    assert cert.passed and cert.mu > 0
    true_min = float(u[cylinder_weights(HGRID, Cylinder(BASE, 1 / 3, 1.0)) > 0].min())
    assert cert.details["true_min"] == true_min
    assert cert.mu <= true_min * (1 + 1e-6)
    L = LogTransform(cert.delta)
    assert float(L(cert.mu)) == pytest.approx(CLOSURE * L.at_zero, rel=1e-9)
    assert [r.name for r in cert.chain] == ["l1_gain", "dual_gain", "sup_control"]


def test_certificate_json(smooth_certificate):
    d = json.loads(smooth_certificate.to_json())
    assert {"mu", "delta", "R", "eta", "passed", "chain"} <= set(d)
    assert all("lhs" in r and "rhs" in r for r in d["chain"])


def test_mu_decreases_with_data_size():
    mus, eps = [], []
    for d in (0.0, -0.5, -1.0):
        coeffs = make_coefficients({"lower_order": {"d": d}}, HGRID)
        u, _ = gaussian_supersolution(coeffs, 0.25)
        cert = weak_harnack(u, coeffs, eta=0.25)
        mus.append(cert.mu)
        eps.append(cert.eps_data)
    assert eps == sorted(eps)
    assert all(mus[i + 1] <= mus[i] for i in range(2))
