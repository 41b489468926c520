import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypoharnack.grid import Grid
from hypoharnack.kolmogorov import KernelSpec, fundamental_solution
from hypoharnack.rough_solver import (
    Sign,
    apply_weak,
    bump_function,
    certify_sign,
    check_ellipticity,
    compose_transform,
    evolve,
    make_coefficients,
)
from hypoharnack.scheme import RoughCoefficients, SolverError, residual
from hypoharnack.transforms import Identity, LogTransform, SmoothedSquare, SmoothedTruncation

GRID = Grid(-1.0, 0.0, 8, 2.0, 17, 2.0, 17)
INTERIOR = (slice(1, None), slice(1, -1), slice(1, -1))


def random_test_function(grid, rng):
    phi = np.zeros(grid.shape)
    phi[1:-1, 1:-1, 1:-1] = rng.random((grid.nt - 1, grid.nx - 2, grid.nv - 2))
    return phi


def test_ellipticity_identity_has_zero_slack():
    rep = check_ellipticity(a=np.eye(2), lam=1.0, Lam=2.0, n=2)
    assert rep.passed and rep.eig_slack == 0.0 and rep.bound_ratio == 1.0


def test_ellipticity_reports_deficit():
    rep = check_ellipticity(a=np.diag([0.5, 0.5]), lam=1.0, Lam=2.0, n=2)
    assert not rep.passed
    assert rep.eig_slack == pytest.approx(-0.5)
    assert rep.violating == 1


def test_ellipticity_checkerboard():
    c = make_coefficients({"kind": "checkerboard", "lam": 1.0, "Lam": 4.0}, GRID)
    a = c.full("a")
    assert set(np.unique(a)) == {1.0, 4.0}
    assert check_ellipticity(c).passed
    # direct eigenvalue scan of a Id with the bound Lam = 4 n
    scan = check_ellipticity(a=a[..., None, None] * np.eye(2), lam=1.0, Lam=8.0, n=2)
    assert scan.passed and scan.eig_slack == 0.0


def test_unknown_recipe_rejected():
    with pytest.raises(ValueError):
        make_coefficients({"kind": "striped"}, GRID)
    with pytest.raises(ValueError):
        make_coefficients({"lam": 2.0, "Lam": 1.0}, GRID)


def test_constants_are_annihilated(rng):
    c = make_coefficients({"kind": "random", "lam": 1.0, "Lam": 3.0}, GRID)
    u = np.full(GRID.shape, 2.5)
    for _ in range(5):
        assert abs(apply_weak(c, u, random_test_function(GRID, rng))) < 1e-10


def test_weak_pairing_rejects_bad_support():
    phi = np.ones(GRID.shape)
    with pytest.raises(ValueError):
        apply_weak(RoughCoefficients(GRID), np.zeros(GRID.shape), phi)


def test_weak_pairing_is_summation_by_parts(rng):
    """The weak pairing equals the nodal residual tested against phi."""
    c = make_coefficients(
        {"kind": "random", "lam": 1.0, "Lam": 3.0, "lower_order": {
            "b": {"amplitude": 0.3}, "c": {"amplitude": 0.5}, "d": {"amplitude": 0.2},
            "f": {"amplitude": 0.4}, "g": {"amplitude": 0.1}}},
        GRID,
    )
    u = rng.normal(size=GRID.shape)
    phi = random_test_function(GRID, rng)
    strong = float(np.sum(residual(c, u) * phi) * GRID.cell_volume)
    assert apply_weak(c, u, phi) == pytest.approx(strong, rel=1e-10, abs=1e-12)


def test_weak_pairing_linear(rng):
    c = make_coefficients({"kind": "checkerboard", "lam": 1.0, "Lam": 2.0}, GRID)
    u1, u2 = rng.normal(size=(2, *GRID.shape))
    phi = random_test_function(GRID, rng)
    lhs = apply_weak(c, u1 + u2, phi)
    assert lhs == pytest.approx(apply_weak(c, u1, phi) + apply_weak(c, u2, phi), rel=1e-10)


def test_kernel_is_a_weak_solution():
    """Pairing of the sampled kernel with a fixed bump shrinks under refinement."""
    vals = []
    for n in (17, 33):
        g = Grid(0.5, 1.5, n - 1, 2.0, n, 2.0, n)
        t3, x3, v3 = np.meshgrid(g.t, g.x, g.v, indexing="ij")
        u = fundamental_solution(KernelSpec(), t3, np.stack([x3, v3], -1), 0.0, np.zeros(2))
        phi = np.exp(-((t3 - 1.0) ** 2 + x3**2 + v3**2) / 0.1) * (np.abs(t3 - 1) < 0.45) * (x3**2 + v3**2 < 1.8**2)
        phi[0] = phi[-1] = 0
        phi[:, 0] = phi[:, -1] = phi[:, :, 0] = phi[:, :, -1] = 0
        vals.append(abs(apply_weak(RoughCoefficients(g), u, phi)))
    assert vals[1] < vals[0]


def test_evolve_preserves_constants():
    c = make_coefficients({"kind": "random", "lam": 1.0, "Lam": 4.0}, GRID)
    u = evolve(c, np.full((GRID.nx, GRID.nv), 3.0)).values
    assert np.allclose(u, 3.0, atol=1e-12)


def test_evolve_positivity(rng):
    c = make_coefficients(
        {"kind": "random", "lam": 1.0, "Lam": 4.0, "lower_order": {"g": {"amplitude": 1.0, "sign": "nonpositive"}}},
        GRID,
    )
    u0 = rng.random((GRID.nx, GRID.nv))
    u = evolve(c, u0, boundary=np.zeros(GRID.shape)).values
    assert u.min() >= -1e-12


def test_evolve_rejects_non_elliptic():
    c = RoughCoefficients(GRID, a=0.5, lam=1.0, Lam=2.0)
    with pytest.raises(SolverError):
        evolve(c, np.zeros((GRID.nx, GRID.nv)))


def test_certify_sign_classes(rng):
    c = make_coefficients({"kind": "checkerboard", "lam": 1.0, "Lam": 3.0}, GRID)
    X, V = np.meshgrid(GRID.x, GRID.v, indexing="ij")
    u0 = np.exp(-(X**2 + V**2))
    src = -np.abs(rng.random(GRID.shape))
    u = evolve(c, u0, source=src, boundary=np.zeros(GRID.shape)).values
    assert certify_sign(c, u).certificate is Sign.SUBSOLUTION
    flipped = c.with_data(f=-np.asarray(c.f), g=-np.asarray(c.g))
    assert certify_sign(flipped, -u).certificate is Sign.SUPERSOLUTION
    bumped = u + 0.5 * bump_function(GRID, (4, 8, 8), 3)
    cert = certify_sign(c, bumped)
    assert cert.certificate is Sign.NEITHER
    assert cert.worst_sub["center"] and cert.worst_case > cert.tol


def test_identity_composition_shifts_data(rng):
    c = make_coefficients(
        {"kind": "checkerboard", "lam": 1.0, "Lam": 2.0,
         "lower_order": {"b": {"amplitude": 0.3}, "d": {"amplitude": 0.4}, "f": {"amplitude": 0.2}, "g": 0.1}},
        GRID,
    )
    u = rng.normal(size=GRID.shape)
    comp = compose_transform(c, u, Identity())
    f = c.full("f")
    b = c.full("b")
    expected_face = 0.5 * (f[..., 1:] + f[..., :-1]) - 0.5 * (b[..., 1:] + b[..., :-1]) * 0.5 * (u[..., 1:] + u[..., :-1])
    assert np.allclose(comp.coeffs.f_face, expected_face)
    assert np.allclose(comp.coeffs.full("g"), c.full("g") - c.full("d") * u)
    assert np.all(comp.defect == 0)
    assert np.allclose(residual(comp.coeffs, comp.v.values), residual(c, u))


def test_composition_rejects_wrong_sign():
    u = np.linspace(0.1, 0.9, GRID.nt + 1)[:, None, None] * np.ones(GRID.shape)
    with pytest.raises(ValueError):
        compose_transform(RoughCoefficients(GRID), u, LogTransform(0.1), mode="sub")


TRANSFORMS = {
    "truncation": (lambda: SmoothedTruncation(0.2, 0.3), "sub"),
    "log": (lambda: LogTransform(0.1), "super"),
    "square": (lambda: SmoothedSquare(0.1), "sub"),
}


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    name=st.sampled_from(sorted(TRANSFORMS)),
    Lam=st.floats(1.0, 6.0),
    amp=st.floats(0.0, 0.5),
)
def test_composition_inequality_holds_pointwise(seed, name, Lam, amp):
    make, mode = TRANSFORMS[name]
    rng = np.random.default_rng(seed)
    lower = {k: {"amplitude": amp} for k in ("b", "c", "d", "f", "g")}
    c = make_coefficients({"kind": "random", "lam": 1.0, "Lam": Lam, "seed": seed, "lower_order": lower}, GRID)
    u = rng.random(GRID.shape) * 1.5
    Phi = make()
    comp = compose_transform(c, u, Phi, mode=mode)
    lhs = residual(comp.coeffs, comp.v.values) + comp.defect
    rhs = Phi.eval(u)[1] * residual(c, u)
    gap = (lhs - rhs)[INTERIOR]
    scale = 1.0 + np.abs(rhs[INTERIOR]).max()
    assert gap.max() <= 1e-9 * scale
    assert np.all(comp.defect >= -1e-12)
