"""Positivity spreading for nonnegative supersolutions.

v = G_delta(u) is a subsolution of the composed operator.  Three measured
estimates are chained: a gradient bound from integrating the slice mass of
v, an L1 bound obtained by pairing v with the dual solution, and the
supremum bound for v.  Shrinking delta until sup v <= (3/4) G_delta(0) gives
a positive lower bound mu for u on C_{1/3,1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .degiorgi import DEFAULT_EXPONENTS, _dv_squared, _node_flux, check_exponents, coefficient_size, supremum_bound
from .geometry import Cylinder, PhasePoint, sigma_domains
from .grid import Grid, GridField, cylinder_weights, lp_norm
from .kolmogorov import DualProblem, measure_set_weights, solve_dual
from .reports import EstimateReport, _clean
from .rough_solver import Composition, RoughCoefficients, compose_transform, evolve
from .scheme import residual
from .transforms import LogTransform, log_profile

CLOSURE = 0.75


def log_transform_eval(L: LogTransform, z):
    """(G_delta, G_delta', G_delta'') at z >= 0."""
    return L.eval(z)


def g_magic_gap(z):
    """G'' - (G')^2 for the unshifted profile and its closed form 2/z - 1, on (0, 1]."""
    G, G1, G2 = log_profile(z)
    return G2 - G1**2, 2.0 / np.asarray(z, dtype=float) - 1.0


@dataclass
class HarnackCertificate:
    mu: float
    delta: float
    R: float
    eta: float
    passed: bool
    chain: list
    eps_data: float = 0.0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(
            {
                "mu": self.mu,
                "delta": self.delta,
                "R": self.R,
                "eta": self.eta,
                "passed": self.passed,
                "eps_data": self.eps_data,
                "chain": [r.to_dict() for r in self.chain],
                "details": self.details,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _base(base):
    return base or PhasePoint.origin()


def event_set(u: np.ndarray, grid, base=None) -> np.ndarray:
    """{u >= 1} inside C_{1,1} with t <= t0 - 2/3."""
    return (np.asarray(u) >= 1.0) & (measure_set_weights(grid, _base(base)) > 0)


def event_fraction(u: np.ndarray, grid, base=None) -> float:
    ref = measure_set_weights(grid, _base(base))
    return float(ref[np.asarray(u) >= 1.0].sum() / ref.sum())


def calibrate_amplitude(u1: np.ndarray, grid, eta: float, base=None) -> float:
    """A > 0 with |{A u1 >= 1}| closest to eta |C_{1,1} cap {t <= -2/3}| from above."""
    ref = measure_set_weights(grid, _base(base))
    inside = ref > 0
    vals, wts = u1[inside], ref[inside]
    order = np.argsort(-vals, kind="stable")
    cum = np.cumsum(wts[order]) / wts.sum()
    k = min(int(np.searchsorted(cum, eta - 1e-12)), len(order) - 1)
    level = vals[order[k]]
    if not level > 0:
        raise ValueError("profile is not positive on enough of the measure set")
    return 1.0 / level


def gaussian_supersolution(
    coeffs: RoughCoefficients, eta: float, width: float = 0.5, center=(0.0, 0.0), base=None
) -> tuple[GridField, float]:
    """Solution of P u = 0 from a Gaussian at the first time, scaled so {u >= 1} has fraction eta.

    Zero lateral data and a positive start keep u >= 0 (discrete maximum principle).
    """
    g = coeffs.grid
    _, x, v = g.mesh()
    u0 = np.exp(-((x[0] - center[0]) ** 2 + (v[0] - center[1]) ** 2) / width**2)
    u1 = evolve(coeffs, u0, boundary=np.zeros(g.shape)).values
    A = calibrate_amplitude(u1, g, eta, base)
    return GridField(g, A * u1, {"amplitude": A, "eta": eta}), A


# --- the three estimates ---------------------------------------------------


def l1_gain(comp: Composition, R: float, base=None, G0: float | None = None, tol: float = 1e-8) -> EstimateReport:
    """Gradient bound on Sigma~_R from the slice mass E(t) = sum v eta_R^2.

    At every time level the discrete derivative of E is compared with
    -(lam/4) sum |D_v v|^2 eta^2 + (2/lam) sum Lam^2 |D_v eta|^2 + sum |f~||D_v eta^2|
    + (2/lam) sum |c~|^2 eta^2 + sum_{eta > 0} |g~|.
    """
    ct = comp.coeffs
    g = ct.grid
    v = comp.v.values
    lam = ct.lam
    sig = sigma_domains(R, _base(base))
    eta = sig.eta.on_grid(g)
    deta = np.gradient(eta, g.dv, axis=2)
    deta2 = np.gradient(eta**2, g.dv, axis=2)
    Lam, c = ct.full("Lam"), ct.full("c")
    f, gt = _node_flux(ct), ct.full("g")
    vol = g.dx * g.dv
    grad = _dv_squared(v, g.dv)
    E = (v * eta**2).sum(axis=(1, 2)) * vol
    gterm = (grad * eta**2).sum(axis=(1, 2)) * vol
    rest = (
        (2 / lam) * (Lam**2 * deta**2).sum(axis=(1, 2))
        + (np.abs(f) * np.abs(deta2)).sum(axis=(1, 2))
        + (2 / lam) * (c**2 * eta**2).sum(axis=(1, 2))
        + (np.abs(gt) * (eta > 0)).sum(axis=(1, 2))
    ) * vol
    dE = np.diff(E) / g.dt
    rhs_slice = -(lam / 4) * gterm[1:] + rest[1:]
    scale = 1.0 + np.abs(E).max() / g.dt
    viol = dE - rhs_slice
    worst = int(np.argmax(viol)) + 1
    ok = bool(viol.max() <= tol * scale)

    w_t = cylinder_weights(g, sig.sigma_tilde)
    w_s = cylinder_weights(g, sig.sigma)
    lhs = float(np.sum(w_t * grad))
    G0 = float(np.abs(v).max()) if G0 is None else G0
    CR = math.pi * sig.sigma.r**2
    bracket = (
        CR * G0
        + lp_norm(Lam, w_s, 2) ** 2
        + lp_norm(f, w_s, 1)
        + lp_norm(c, w_s, 2) ** 2
        + lp_norm(gt, w_s, 1)
    )
    integrated = (4 / lam) * (E[0] - E[-1] + rest[1:].sum() * g.dt)
    return EstimateReport(
        "l1_gain",
        lhs,
        bracket,
        passed=ok,
        details={
            "C1": lhs / bracket if bracket > 0 else 0.0,
            "integrated_bound": integrated,
            "worst_slice": worst,
            "worst_violation": float(viol.max()),
            "C_R_term": CR,
            "R": R,
        },
    )


def dual_gain(v, dual: DualProblem, coeffs_tilde: RoughCoefficients, R: float, p2: float = 2.0, G0=None, base=None) -> EstimateReport:
    """L1 norm of v on C_{1/2,2} through the pairing K(t) = sum v w eta~ with the dual solution."""
    g = coeffs_tilde.grid
    v = np.asarray(getattr(v, "values", v), dtype=float)
    base = _base(base)
    vanish = float(np.abs(v[dual.E]).max()) if dual.E.any() else 0.0
    sig = sigma_domains(R, base)
    eta_t = sig.eta_tilde.on_grid(g)
    w = dual.w
    vol = g.dx * g.dv
    K = (v * w * eta_t).sum(axis=(1, 2)) * vol
    wc = cylinder_weights(g, Cylinder(base, 0.5, 2.0))
    lhs = lp_norm(v, wc, 1)
    active = wc.sum(axis=(1, 2)) > 0
    supK = float(K[active].max()) if active.any() else 0.0
    mu0 = dual.mu0
    rhs = (K[active].sum() * g.dt / mu0) if mu0 > 0 else math.inf

    qbar2 = math.inf if p2 == 2 else 1 / (0.5 - 1 / p2)
    w_t = cylinder_weights(g, sig.sigma_tilde)
    w_s = cylinder_weights(g, sig.sigma)
    Lam, c = coeffs_tilde.full("Lam"), coeffs_tilde.full("c")
    dvw = np.gradient(w, g.dv, axis=2)
    G0 = float(np.abs(v).max()) if G0 is None else G0
    f, gt = _node_flux(coeffs_tilde), coeffs_tilde.full("g")
    xv = math.sqrt(float(np.sum(w_t * _dv_squared(v, g.dv))))
    K_bound = (
        xv * (lp_norm((1 + Lam) * dvw, w_t, 2) + lp_norm((1 + Lam) * w, w_t, 2) + lp_norm(c * w, w_t, 2))
        + G0 * dual.l1 / R
        + lp_norm(f, w_s, 2) * (lp_norm(w, w_s, p2) + lp_norm(dvw, w_s, p2))
        + lp_norm(gt, w_s, 2) * lp_norm(w, w_s, p2)
    )
    ok = vanish == 0.0 and lhs <= rhs * (1 + 1e-9) + 1e-300
    return EstimateReport(
        "dual_gain",
        lhs,
        rhs,
        passed=bool(ok),
        details={
            "vanishes_on_E": vanish == 0.0,
            "sup_K": supK,
            "K_bound": K_bound,
            "C2": supK / K_bound if K_bound > 0 else 0.0,
            "mu0": mu0,
            "w_l1": dual.l1,
            "Delta": lp_norm(Lam, w_t, qbar2) + lp_norm(c, w_t, qbar2),
        },
    )


# --- end to end --------------------------------------------------------------


def crop_centered(coeffs: RoughCoefficients, u: np.ndarray, x_reach: float, v_reach: float, margin: int = 2):
    """Restrict coefficients and u to the nodes with |x| <= x_reach, |v| <= v_reach (plus ``margin`` nodes).

    Needs odd node counts so the sub-grid is again centred at the origin.
    Returns the inputs unchanged when the crop would not be smaller.
    """
    g = coeffs.grid
    if g.nx % 2 == 0 or g.nv % 2 == 0:
        return coeffs, u
    cx, cv = g.nx // 2, g.nv // 2
    mx = min(cx, int(math.ceil(x_reach / g.dx)) + margin)
    mv = min(cv, int(math.ceil(v_reach / g.dv)) + margin)
    if mx == cx and mv == cv:
        return coeffs, u
    sub = Grid(g.t_lo, g.t_hi, g.nt, mx * g.dx, 2 * mx + 1, mv * g.dv, 2 * mv + 1)
    sx, sv, sf = slice(cx - mx, cx + mx + 1), slice(cv - mv, cv + mv + 1), slice(cv - mv, cv + mv)

    def cut(arr, faces=False):
        if arr is None or np.ndim(arr) == 0:
            return arr
        return np.asarray(arr)[..., sx, sf if faces else sv]

    changes = {k: cut(getattr(coeffs, k)) for k in ("a", "b", "c", "d", "f", "g", "Lam", "a_x")}
    new = RoughCoefficients(sub, lam=coeffs.lam, f_face=cut(coeffs.f_face, True), meta=coeffs.meta, **changes)
    return new, np.asarray(u)[..., sx, sv]


def _check_supersolution(coeffs: RoughCoefficients, u: np.ndarray, tol: float) -> float:
    R = residual(coeffs, u)
    worst = float(R.min())
    scale = 1.0 + np.abs(u).max() / coeffs.grid.dt
    if worst < -tol * scale:
        raise ValueError(f"u is not a supersolution: P_h u reaches {worst:.3g}")
    return worst


def weak_harnack(
    u,
    coeffs: RoughCoefficients,
    eta: float | None = None,
    delta_S: float | None = None,
    Delta: float | None = None,
    C_R: float = 1.5,
    beta: float = 0.0,
    exponents: dict | None = None,
    p2: float = 2.0,
    closure: float = CLOSURE,
    max_j: int = 20,
    refine: int = 20,
    base=None,
    tol: float = 1e-8,
) -> HarnackCertificate:
    """Lower bound mu for u on C_{1/3,1} from its measure of {u >= 1}.

    delta runs through 2^-j, j = 1..max_j; the first closing value is refined
    by ``refine`` bisection steps in log delta against the last failing one.
    ``delta_S`` and ``Delta`` are measured when not supplied.
    """
    g = coeffs.grid
    base = _base(base)
    ex = check_exponents(exponents or {})
    u = np.asarray(getattr(u, "values", u), dtype=float)
    if u.min() < -tol * max(1.0, np.abs(u).max()):
        raise ValueError("u must be nonnegative")
    u = np.maximum(u, 0.0)
    _check_supersolution(coeffs, u, tol)
    E = event_set(u, g, base)
    fraction = event_fraction(u, g, base)
    if eta is not None and fraction < eta - 1e-9:
        raise ValueError(f"measure condition fails: |E| fraction {fraction:.4f} < eta {eta}")

    inner, outer = Cylinder(base, 1 / 3, 1.0), Cylinder(base, 0.5, 2.0)
    w_out = cylinder_weights(g, outer)
    dS = coefficient_size(coeffs, w_out, ex) if delta_S is None else delta_S
    R = C_R * (1 + dS) ** beta
    sig = sigma_domains(R, base)
    clipped = sig.sigma.r * (1 + sig.sigma.s) > g.x_half or sig.sigma.r > g.v_half
    w_s = cylinder_weights(g, sig.sigma)
    fbar = _node_flux(coeffs) - coeffs.full("b") * u
    gbar = coeffs.full("g") - coeffs.full("d") * u
    eps_data = lp_norm(fbar, w_s, ex["q_b"]) + lp_norm(gbar, w_s, ex["q_d"])

    # the closure test only sees the outer cylinder, so it runs on a cropped grid
    reach = outer.r + outer.s * (abs(base.vel[0]) + outer.r)
    c_crop, u_crop = crop_centered(coeffs, u, abs(base.pos[0]) + reach, abs(base.vel[0]) + outer.r)

    def attempt(delta):
        L = LogTransform(delta)
        comp = compose_transform(c_crop, u_crop, L, mode="super")
        sb = supremum_bound(comp.v.values, comp.coeffs, inner, outer, ex)
        return sb.converged and sb.sup_estimate <= closure * L.at_zero, comp, sb

    sweep = []
    found = None
    prev = None
    for j in range(1, max_j + 1):
        d = 2.0**-j
        ok, comp, sb = attempt(d)
        sweep.append({"delta": d, "closed": ok, "sup_v": sb.sup_estimate, "G0": LogTransform(d).at_zero})
        if ok:
            found = (d, comp, sb)
            break
        prev = d
    if found is None:
        return HarnackCertificate(
            0.0, math.nan, R, fraction, False, [], eps_data, {"sweep": sweep, "reason": "no delta closed"}
        )
    if prev is not None:
        lo, hi = math.log(found[0]), math.log(prev)  # lo closes, hi does not
        for _ in range(refine):
            mid = 0.5 * (lo + hi)
            ok, comp, sb = attempt(math.exp(mid))
            if ok:
                lo, found = mid, (math.exp(mid), comp, sb)
            else:
                hi = mid
    delta, _, sb = found
    L = LogTransform(delta)
    comp = compose_transform(coeffs, u, L, mode="super")
    G0 = L.at_zero
    mu = 1.0 if sb.sup_estimate == 0 else L.level_for(closure * G0)

    r_l1 = l1_gain(comp, R, base, G0=G0)
    dual = solve_dual(E, g, base)
    r_dual = dual_gain(comp.v.values, dual, comp.coeffs, R, p2=p2, G0=G0, base=base)
    Dm = r_dual.details["Delta"] if Delta is None else Delta
    sup_lhs = sb.sup_estimate**2 - (G0 / 2) ** 2
    sup_rhs = (1 + dS) ** (2 * beta) * (1 + Dm) ** 2 * (
        G0 + 1 + Dm**2 + (eps_data / delta) ** 2 + (eps_data / delta) ** 4
    )
    r_sup = EstimateReport(
        "sup_control",
        sup_lhs,
        sup_rhs,
        passed=bool(sb.converged and sb.invariants_ok and sb.sound),
        details={"sup_v": sb.sup_estimate, "G0": G0, "D": sb.D, "N": sb.N, "closure": closure},
    )
    w_in = cylinder_weights(g, inner)
    true_min = float(u[w_in > 0].min())
    smallness = (eps_data / delta) ** 2 + (eps_data / delta) ** 4 <= G0
    chain = [r_l1, r_dual, r_sup]
    passed = all(r.passed for r in chain) and sb.sup_estimate <= closure * G0
    return HarnackCertificate(
        mu,
        delta,
        R,
        fraction,
        bool(passed),
        chain,
        eps_data,
        {
            "delta_S": dS,
            "Delta": Dm,
            "true_min": true_min,
            "sweep": sweep,
            "sigma_clipped": bool(clipped),
            "smallness_met": bool(smallness),
            "mu0": dual.mu0,
            "C_R": C_R,
            "beta": beta,
        },
    )
