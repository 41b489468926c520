"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import time

import numpy as np
import pytest

from hypoharnack.cli import sup_cases, viscosity_problem
from hypoharnack.config import load_dict
from hypoharnack.degiorgi import supremum_bound
from hypoharnack.geometry import Cylinder, PhasePoint
from hypoharnack.grid import Grid
from hypoharnack.harnack import gaussian_supersolution, g_magic_gap, weak_harnack
from hypoharnack.kolmogorov import (
    SmoothProblem,
    probe_hypothesis1,
    solve_smooth_ivp,
    validate_kernel,
    viscosity_sweep,
    weak_max_principle_check,
)
from hypoharnack.rough_solver import bump_function, certify_sign, compose_transform, evolve, make_coefficients
from hypoharnack.transforms import LogTransform, SmoothedSquare, SmoothedTruncation

pytestmark = pytest.mark.acceptance


def report(number: int, name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_1_kernel_validity():
    start = time.perf_counter()
    rep = validate_kernel(levels=(33, 65, 129), taus=(0.1, 0.5, 1.0))
    runtime = time.perf_counter() - start
    ok = rep["max_normalization_error"] <= 1e-6 and rep["observed_order"] >= 1.8 and runtime <= 60
    report(1, "kernel", ok, f"norm err {rep['max_normalization_error']:.2e}, order {rep['observed_order']:.3f}, {runtime:.1f} s")


def test_2_hypothesis1_probe():
    start = time.perf_counter()
    rep = probe_hypothesis1(p1=2.5, gamma0=2.0, gamma1=2.0, trials=50, levels=2, seed=0)
    runtime = time.perf_counter() - start
    change = rep.details["relative_change"]
    ok = change <= 0.2 and runtime <= 600 and len(rep.trials) == 100
    report(2, "hypothesis1", ok, f"max ratios {rep.details['max_ratio_per_level']}, change {change:.3f}, {runtime:.0f} s")


def test_3_weak_maximum_principle():
    g = Grid(-1.0, 0.0, 16, 3.0, 33, 3.0, 33)
    rng = np.random.default_rng(0)
    worst, detected, controls = -np.inf, 0, 0
    for k in range(10):
        src = -rng.random(g.shape) * (k + 1)
        w = solve_smooth_ivp(SmoothProblem(g, G=src)).values
        rep = weak_max_principle_check(w, grid=g)
        assert rep.certified_subsolution and rep.zero_data
        worst = max(worst, rep.max_value)
        for _ in range(2):
            centre = tuple(int(i) for i in rng.integers((4, 4, 4), (g.nt - 3, g.nx - 4, g.nv - 4)))
            bumped = w + (1.0 - w.min()) * 2 * bump_function(g, centre, 3)
            controls += 1
            detected += not weak_max_principle_check(bumped, grid=g).passed
    ok = worst <= 1e-8 and detected == controls
    report(3, "weak max principle", ok, f"max {worst:.2e}, negative controls detected {detected}/{controls}")


def _draw(seed, g, for_super):
    rng = np.random.default_rng(seed)
    lower = {k: {"amplitude": 0.3} for k in ("b", "c", "d")}
    lower["g"] = {"amplitude": 0.2, "sign": "nonpositive"} if for_super else {"amplitude": 0.2}
    if not for_super:
        lower["f"] = {"amplitude": 0.2}
    c = make_coefficients({"kind": "random", "lam": 1.0, "Lam": 4.0, "seed": seed, "lower_order": lower}, g)
    X, V = np.meshgrid(g.x, g.v, indexing="ij")
    u0 = np.exp(-((X - rng.uniform(-1, 1)) ** 2 + (V - rng.uniform(-1, 1)) ** 2))
    src = rng.random(g.shape) * (1 if for_super else -1)
    return c, evolve(c, u0, source=src, boundary=np.zeros(g.shape)).values


def test_4_composition_lemma():
    g = Grid(-1.0, 0.0, 16, 3.0, 33, 3.0, 33)
    transforms = [("K", SmoothedTruncation(0.1, 0.2), "sub"), ("G_delta", LogTransform(0.1), "super"),
                  ("square", SmoothedSquare(0.1), "sub")]
    certified, total, worst = 0, 0, -np.inf
    for seed in range(10):
        for name, Phi, mode in transforms:
            c, u = _draw(seed, g, mode == "super")
            base = certify_sign(c, u, tol=1e-6)
            assert base.is_supersolution if mode == "super" else base.is_subsolution
            comp = compose_transform(c, u, Phi, mode=mode)
            extra = comp.gradient_energy if mode == "super" else None
            cert = certify_sign(comp.coeffs, comp.v.values, tol=1e-6, extra=extra)
            total += 1
            certified += cert.is_subsolution
            worst = max(worst, cert.max_pairing)
    ok = certified == total
    report(4, "composition", ok, f"{certified}/{total} certified, worst pairing {worst:.2e}")


@pytest.fixture(scope="module")
def sup_runs():
    cfg = load_dict({"campaign": "sup-bound"})
    base = PhasePoint.origin()
    inner, outer = Cylinder(base, 0.25, 0.5), Cylinder(base, 0.5, 1.0)
    out = {}
    for level, grid in enumerate((cfg.grid(), cfg.grid().refine(2))):
        for name, co, u in sup_cases(cfg, grid):
            start = time.perf_counter()
            res = supremum_bound(u, co, inner, outer, cfg.exponents)
            out[(name, level)] = (res, time.perf_counter() - start, grid)
    return out


def test_5_degiorgi_invariants(sup_runs):
    steps = sum(len(r.trace) for r, _, _ in sup_runs.values())
    inclusion = all(s.inclusion for r, _, _ in sup_runs.values() for s in r.trace)
    chebyshev = all(s.chebyshev_ok for r, _, _ in sup_runs.values() for s in r.trace)
    eps, h = 0.01, 0.5
    z = np.linspace(h - 1, h + 1, 10_000)
    scan = float(np.abs(SmoothedTruncation(eps, h)(z) - np.maximum(z - h, 0)).max())
    ok = inclusion and chebyshev and steps > 0 and scan <= eps
    report(5, "De Giorgi invariants", ok, f"{len(sup_runs)} runs, {steps} steps, truncation scan {scan:.2e} <= {eps}")


def test_6_supremum_bound(sup_runs):
    fine = {k: v for k, v in sup_runs.items() if k[1] == 1}
    assert all(g.shape == (65, 65, 65) for _, _, g in fine.values())
    sound = all(r.converged and r.true_max <= r.sup_estimate <= 10 * r.true_max for r, _, _ in fine.values())
    names = sorted({k[0] for k in sup_runs})
    change = {n: abs(sup_runs[(n, 1)][0].C_S - sup_runs[(n, 0)][0].C_S) / sup_runs[(n, 0)][0].C_S for n in names}
    slowest = max(t for _, t, _ in sup_runs.values())
    over = max(r.sup_estimate / r.true_max for r, _, _ in fine.values())
    ok = sound and len(names) == 6 and max(change.values()) <= 0.3 and slowest <= 1200
    report(6, "sup bound", ok, f"max overshoot {over:.3f}, max C_S change {max(change.values()):.3f}, slowest {slowest:.1f} s")


def test_7_g_magic():
    z = np.linspace(0.0, 1.0, 10_001)[1:]
    gap, closed = g_magic_gap(z)
    err = float(np.max(np.abs(gap - closed) / np.maximum(1.0, np.abs(closed))))
    ok = err <= 1e-12 and bool(np.all(gap >= 0))
    report(7, "g-magic", ok, f"max relative deviation {err:.1e} on 10^4 points")


HGRID = Grid(-1.0, 0.0, 24, 26.0, 261, 13.0, 131)


def _certificate(grid, recipe, eta):
    start = time.perf_counter()
    co = make_coefficients(recipe, grid)
    u, _ = gaussian_supersolution(co, eta)
    cert = weak_harnack(u, co, eta=eta)
    return cert, time.perf_counter() - start


def test_8_weak_harnack():
    runs = {}
    runs["smooth"] = _certificate(HGRID, {}, 0.25)
    runs["smooth_refined"] = _certificate(HGRID.refine(2), {}, 0.25)
    for Lam in (2.0, 4.0, 8.0):
        runs[f"Lam={Lam:g}"] = _certificate(HGRID, {"kind": "checkerboard", "lam": 1.0, "Lam": Lam}, 0.25)
    for eta in (0.1, 0.5):
        runs[f"eta={eta:g}"] = _certificate(HGRID, {}, eta)
    runs["eta=0.25"] = runs["smooth"]
    mu = {k: c.mu for k, (c, _) in runs.items()}
    stable = mu["smooth"] > 0 and abs(mu["smooth_refined"] - mu["smooth"]) / mu["smooth"] <= 0.25
    lam_seq = [mu[f"Lam={L:g}"] for L in (2, 4, 8)]
    eta_seq = [mu[f"eta={e:g}"] for e in (0.1, 0.25, 0.5)]
    lam_ok = all(b <= a for a, b in zip(lam_seq, lam_seq[1:]))
    eta_ok = all(b >= a for a, b in zip(eta_seq, eta_seq[1:]))
    sound = all(c.passed and c.mu <= c.details["true_min"] * (1 + 1e-9) for c, _ in runs.values())
    slowest = max(t for _, t in runs.values())
    ok = stable and lam_ok and eta_ok and sound and slowest <= 1800
    detail = (
        f"mu smooth {mu['smooth']:.4g} -> refined {mu['smooth_refined']:.4g} (stable={stable}); "
        f"Lam 2/4/8 {[round(x, 5) for x in lam_seq]} nonincreasing={lam_ok}; "
        f"eta .1/.25/.5 {[round(x, 5) for x in eta_seq]} nondecreasing={eta_ok}; sound={sound}; slowest {slowest:.0f} s"
    )
    report(8, "weak Harnack", ok, detail)


def test_9_vanishing_viscosity():
    pb, chi = viscosity_problem(load_dict({"campaign": "convergence"}))
    rep = viscosity_sweep(pb, chi, (1e-1, 1e-2, 1e-3))
    diffs = rep.details["cauchy_differences"]
    spread = rep.details["energy_spread"]
    ok = rep.details["decreasing"] and max(spread.values()) <= 2.0
    report(9, "vanishing viscosity", ok, f"Cauchy differences {[f'{d:.2e}' for d in diffs]}, energy spread {max(spread.values()):.3f}")
