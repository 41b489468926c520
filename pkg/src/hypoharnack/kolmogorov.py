"""Smooth-problem oracle for the kinetic operator d_t + v . grad_pos - Lap_vel.

Contains the explicit transition density, discrete solvers for the smooth
source problem and the dual problem, the weak maximum principle check, and
the vanishing-viscosity regularisation with an extension operator.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .geometry import Cylinder, PhasePoint, bridge, sigma_domains
from .grid import Grid, GridField, cylinder_weights, domain_weights, lp_norm
from .reports import EstimateReport
from .rough_solver import RoughCoefficients, certify_sign, evolve
from .transforms import SmoothedTruncation


@dataclass(frozen=True)
class KernelSpec:
    d_x: int = 1
    d_v: int = 1

    def __post_init__(self):
        if self.d_x != self.d_v:
            raise ValueError("kinetic kernel needs d_x == d_v")


def fundamental_solution(spec: KernelSpec, t, p, s, q) -> np.ndarray:
    """Transition density Gamma(t, p; s, q) of d_t + v . grad_pos - Lap_vel.

    ``p`` and ``q`` hold (pos, vel) along the last axis.  With tau = t - s,
    a = p_pos - q_pos - tau q_vel and b = p_vel - q_vel, each component pair
    contributes sqrt(3)/(2 pi tau^2) exp(-3a^2/tau^3 + 3ab/tau^2 - b^2/tau).
    """
    tau = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("fundamental solution needs t > s")
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = spec.d_x
    tau_ = tau[..., None] if np.ndim(tau) else tau
    a = p[..., :d] - q[..., :d] - tau_ * q[..., d:]
    b = p[..., d:] - q[..., d:]
    expo = -3 * a**2 / tau_**3 + 3 * a * b / tau_**2 - b**2 / tau_
    norm = (math.sqrt(3) / (2 * math.pi)) ** d / np.asarray(tau, dtype=float) ** (2 * d)
    return norm * np.exp(expo.sum(axis=-1))


def kernel_covariance(tau: float) -> np.ndarray:
    """Covariance of (pos, vel) under the kernel for one component pair."""
    return np.array([[2 * tau**3 / 3, tau**2], [tau**2, 2 * tau]])


# --- kernel validation ------------------------------------------------------------


def kernel_normalization(tau: float, q=(0.3, -0.7), n: int = 801, width: float = 12.0) -> float:
    """Tensor trapezoid integral of Gamma(tau, . ; 0, q) over a box covering `width` std devs."""
    spec = KernelSpec()
    cov = kernel_covariance(tau)
    mean = np.array([q[0] + tau * q[1], q[1]])
    sx, sv = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    xs = np.linspace(mean[0] - width * sx, mean[0] + width * sx, n)
    vs = np.linspace(mean[1] - width * sv, mean[1] + width * sv, n)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    G = fundamental_solution(spec, tau, np.stack([X, V], -1), 0.0, np.asarray(q, dtype=float))
    return float(trapezoid(trapezoid(G, vs, axis=1), xs))


def kernel_moments(tau: float, q=(0.3, -0.7), n: int = 801) -> dict:
    spec = KernelSpec()
    cov = kernel_covariance(tau)
    mean = np.array([q[0] + tau * q[1], q[1]])
    sx, sv = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    xs = np.linspace(mean[0] - 12 * sx, mean[0] + 12 * sx, n)
    vs = np.linspace(mean[1] - 12 * sv, mean[1] + 12 * sv, n)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    G = fundamental_solution(spec, tau, np.stack([X, V], -1), 0.0, np.asarray(q, dtype=float))
    m0 = trapezoid(trapezoid(G, vs, axis=1), xs)
    mx = trapezoid(trapezoid(G * X, vs, axis=1), xs) / m0
    mv = trapezoid(trapezoid(G * V, vs, axis=1), xs) / m0
    return {"mass": float(m0), "mean_pos": float(mx), "mean_vel": float(mv), "transported_pos": float(mean[0])}


def kernel_residual(n: int, q=(0.0, 0.0), window=(0.5, 1.5), box=2.0, min_dist=1.0) -> float:
    """Max centred-difference residual of (d_t + v d_x - d_vv) Gamma on an n^3 space-time grid.

    Only nodes at distance >= ``min_dist`` from the source point are counted.
    """
    spec = KernelSpec()
    t = np.linspace(window[0], window[1], n)
    x = np.linspace(-box, box, n)
    v = np.linspace(-box, box, n)
    T, X, V = np.meshgrid(t, x, v, indexing="ij")
    G = fundamental_solution(spec, T, np.stack([X, V], -1), 0.0, np.asarray(q, dtype=float))
    ht, hx, hv = t[1] - t[0], x[1] - x[0], v[1] - v[0]
    I = slice(1, -1)
    Gt = (G[2:, I, I] - G[:-2, I, I]) / (2 * ht)
    Gx = (G[I, 2:, I] - G[I, :-2, I]) / (2 * hx)
    Gvv = (G[I, I, 2:] - 2 * G[I, I, I] + G[I, I, :-2]) / hv**2
    R = Gt + V[I, I, I] * Gx - Gvv
    far = np.hypot(X[I, I, I] - q[0], V[I, I, I] - q[1]) >= min_dist
    return float(np.abs(R[far]).max())


def chapman_kolmogorov_error(t=1.0, mid=0.45, s=0.0, p=(0.4, 0.2), q=(0.0, 0.0), n=601, width=10.0) -> float:
    """|int Gamma(t,p;mid,y) Gamma(mid,y;s,q) dy - Gamma(t,p;s,q)| relative to the direct value."""
    spec = KernelSpec()
    cov = kernel_covariance(mid - s)
    mean = np.array([q[0] + (mid - s) * q[1], q[1]])
    xs = np.linspace(mean[0] - width * math.sqrt(cov[0, 0]), mean[0] + width * math.sqrt(cov[0, 0]), n)
    vs = np.linspace(mean[1] - width * math.sqrt(cov[1, 1]), mean[1] + width * math.sqrt(cov[1, 1]), n)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    Y = np.stack([X, V], -1)
    integrand = fundamental_solution(spec, t, np.asarray(p, dtype=float), mid, Y) * fundamental_solution(
        spec, mid, Y, s, np.asarray(q, dtype=float)
    )
    composed = trapezoid(trapezoid(integrand, vs, axis=1), xs)
    direct = float(fundamental_solution(spec, t, np.asarray(p, dtype=float), s, np.asarray(q, dtype=float)))
    return abs(composed - direct) / direct


def validate_kernel(levels=(33, 65, 129), taus=(0.1, 0.5, 1.0)) -> dict:
    """Normalisation at several times and the observed order of the residual under refinement."""
    start = time.perf_counter()
    norm_err = {tau: abs(kernel_normalization(tau) - 1) for tau in taus}
    res = [kernel_residual(n) for n in levels]
    orders = [
        math.log(res[i] / res[i + 1]) / math.log((levels[i + 1] - 1) / (levels[i] - 1)) for i in range(len(res) - 1)
    ]
    return {
        "normalization_error": norm_err,
        "max_normalization_error": max(norm_err.values()),
        "residuals": dict(zip(levels, res)),
        "orders": orders,
        "observed_order": orders[-1],
        "chapman_kolmogorov_error": chapman_kolmogorov_error(),
        "runtime_s": time.perf_counter() - start,
    }


# --- smooth source problem -------------------------------------------------------


@dataclass
class SmoothProblem:
    """(X_0 - L_0^ext) w = G + X^t F on the grid, w = 0 at t_init and on the lateral boundary.

    ``domain`` is a nodal mask for Omega_t; sources are multiplied by it and
    by {t >= t_init}.  ``a_ext`` replaces the unit velocity diffusion and
    ``ax_ext`` adds a position diffusion (the extension operator L_0^ext).
    """

    grid: Grid
    G: np.ndarray | None = None
    F: np.ndarray | None = None
    t_init: float | None = None
    domain: np.ndarray | None = None
    a_ext: np.ndarray | float = 1.0
    ax_ext: np.ndarray | float | None = None

    def masked(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        mask = np.ones(g.shape, dtype=bool) if self.domain is None else np.asarray(self.domain, dtype=bool)
        t0 = g.t_lo if self.t_init is None else self.t_init
        mask = mask & (g.t[:, None, None] >= t0 - 1e-12)
        G = np.zeros(g.shape) if self.G is None else np.asarray(self.G, dtype=float) * mask
        F = np.zeros(g.shape) if self.F is None else np.asarray(self.F, dtype=float) * mask
        return G, F

    def coefficients(self) -> RoughCoefficients:
        G, F = self.masked()
        return RoughCoefficients(self.grid, a=self.a_ext, f=-F, g=-G, lam=1.0, Lam=2.0 * float(np.max(self.a_ext)), a_x=self.ax_ext)


def solve_smooth_ivp(pb: SmoothProblem, tol: float = 1e-8) -> GridField:
    """Discrete w with (X_0 - L_0^ext)_h w = G + D_v F exactly (up to solver round-off)."""
    g = pb.grid
    coeffs = pb.coefficients()
    # the initial time is the first grid level at or after t_init; earlier sources were masked
    return evolve(coeffs, np.zeros((g.nx, g.nv)), boundary=np.zeros(g.shape), tol=tol)


def smooth_operator(grid: Grid) -> RoughCoefficients:
    return RoughCoefficients(grid, a=1.0, lam=1.0, Lam=2.0)


def random_bumps(grid: Grid, rng, count: int, center_radius: float, width=(0.2, 0.5), t_window=None) -> np.ndarray:
    """Sum of ``count`` Gaussian bumps with random signs, centres inside a ball, widths in ``width``."""
    t, x, v = grid.mesh()
    t_lo, t_hi = t_window or (grid.t_lo, grid.t_hi)
    out = np.zeros(grid.shape)
    for _ in range(count):
        r = center_radius * math.sqrt(rng.random())
        ang = rng.uniform(0, 2 * math.pi)
        c = (rng.uniform(t_lo + 0.1 * (t_hi - t_lo), t_hi), r * math.cos(ang), r * math.sin(ang))
        w = rng.uniform(*width)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5)
        out += amp * np.exp(-((t - c[0]) ** 2 / (0.5 * w) ** 2 + (x - c[1]) ** 2 / w**2 + (v - c[2]) ** 2 / w**2))
    return out


def probe_hypothesis1(
    p1: float = 2.5,
    gamma0: float = 2.0,
    gamma1: float = 2.0,
    trials: int = 50,
    grid: Grid | None = None,
    levels: int = 2,
    seed: int = 0,
    domain_radius: float = 2.0,
) -> EstimateReport:
    """Empirical C_0 in ||w||_{p1} <= C_0 (||G||_{gamma0} + ||F||_{gamma1}) over random smooth data.

    Omega_t = (t_lo, t_hi] x B_{domain_radius}; the norms are over Omega_t.
    The same random draws are replayed on every refinement level.
    """
    if not p1 > 2 or not gamma0 <= gamma1 <= 2:
        raise ValueError("need p1 > 2 and gamma0 <= gamma1 <= 2")
    grid = grid or Grid(-1.0, 0.0, 24, 6.0, 97, 4.0, 65)
    rows = []
    level_max = []
    for level in range(levels):
        g = grid if level == 0 else grid.refine(2.0 ** level)
        t, x, v = g.mesh()
        omega = np.broadcast_to((x**2 + v**2 < domain_radius**2) & (t > g.t_lo), g.shape)
        wts = domain_weights(g) * omega
        rng = np.random.default_rng(seed)
        ratios = []
        for k in range(trials):
            G = random_bumps(g, rng, 3, domain_radius - 0.8)
            F = random_bumps(g, rng, 3, domain_radius - 0.8)
            w = solve_smooth_ivp(SmoothProblem(g, G, F, domain=omega)).values
            den = lp_norm(G * omega, wts, gamma0) + lp_norm(F * omega, wts, gamma1)
            ratio = 0.0 if den == 0 else lp_norm(w, wts, p1) / den
            ratios.append(ratio)
            rows.append({"level": level, "trial": k, "ratio": ratio})
        level_max.append(max(ratios))
    change = abs(level_max[-1] - level_max[-2]) / level_max[-2] if levels > 1 else 0.0
    return EstimateReport(
        "hypothesis1",
        lhs=level_max[-1],
        rhs=1.0,
        grid_level=levels - 1,
        trials=rows,
        passed=bool(change <= 0.2),
        details={"max_ratio_per_level": level_max, "relative_change": change, "p1": p1, "gamma0": gamma0, "gamma1": gamma1},
    )


# --- dual problem ----------------------------------------------------------------


def harnack_grid(nt: int = 48, nx: int = 241, nv: int = 161, x_half: float = 9.0, v_half: float = 6.0) -> Grid:
    """Default box for the dual problem and the positivity pipeline on (-1, 0]."""
    return Grid(-1.0, 0.0, nt, x_half, nx, v_half, nv)


def measure_set_weights(grid: Grid, base: PhasePoint | None = None) -> np.ndarray:
    """Quadrature weights of C_{1,1} intersected with {t <= -2/3}."""
    base = base or PhasePoint.origin()
    w = np.array(cylinder_weights(grid, Cylinder(base, 1.0, 1.0)))
    w[grid.t > base.t - 2.0 / 3.0 + 1e-12] = 0.0
    return w


@dataclass
class DualProblem:
    grid: Grid
    E: np.ndarray
    w: np.ndarray
    mu0: float
    l1: float
    E_measure: float
    fraction: float
    details: dict = field(default_factory=dict)


def solve_dual(E: np.ndarray, grid: Grid, base: PhasePoint | None = None, check_admissible: bool = True) -> DualProblem:
    """Solve the dual equation with source 1_E from w(-1) = 0, forward in time.

    The dual drift is taken to be X_0 itself, so this is the smooth source
    problem with G = 1_E.  ``mu0`` is the minimum of w over C_{1/2,2}.
    """
    base = base or PhasePoint.origin()
    E = np.asarray(E, dtype=bool)
    ref = measure_set_weights(grid, base)
    if check_admissible and np.any(E & (ref <= 0)):
        raise ValueError("E must lie inside C_{1,1} with t <= -2/3")
    w = solve_smooth_ivp(SmoothProblem(grid, G=E.astype(float))).values
    inner = np.asarray(cylinder_weights(grid, Cylinder(base, 0.5, 2.0)))
    mu0 = float(w[inner > 0].min())
    Em = float(ref[E].sum())
    return DualProblem(grid, E, w, mu0, lp_norm(w, domain_weights(grid), 1), Em, Em / float(ref.sum()))


def random_admissible_set(grid: Grid, fraction: float, rng, base: PhasePoint | None = None, smooth: float = 0.4) -> np.ndarray:
    """A random blob-like subset of C_{1,1} with t <= -2/3 holding about ``fraction`` of its measure."""
    ref = measure_set_weights(grid, base)
    inside = ref > 0
    if fraction >= 1:
        return inside.copy()
    t, x, v = grid.mesh()
    field_ = np.zeros(grid.shape)
    for _ in range(6):
        c = rng.uniform(-1, 1, 3)
        field_ += rng.standard_normal() * np.exp(-((x - c[1]) ** 2 + (v - c[2]) ** 2) / smooth**2 - (t + 5 / 6 - c[0] / 6) ** 2 / 0.05)
    vals = field_[inside]
    wts = ref[inside]
    order = np.argsort(-vals, kind="stable")
    cum = np.cumsum(wts[order]) / wts.sum()
    keep = order[: int(np.searchsorted(cum, fraction)) + 1]
    E = np.zeros(grid.shape, dtype=bool)
    idx = np.flatnonzero(inside)[keep]
    E.ravel()[idx] = True
    return E


def earliest_set(grid: Grid, fraction: float, base: PhasePoint | None = None) -> np.ndarray:
    """The admissible set filled from the earliest times forward."""
    ref = measure_set_weights(grid, base)
    inside = ref > 0
    cum = np.cumsum(ref.sum(axis=(1, 2))) / ref.sum()
    last = int(np.searchsorted(cum, fraction))
    E = inside.copy()
    E[last + 1 :] = False
    return E


def probe_dual_spreading(
    eta: float = 0.25,
    p2: float = 2.0,
    R: float = 2.0,
    trials: int = 5,
    grid: Grid | None = None,
    seed: int = 0,
    levels: int = 1,
) -> EstimateReport:
    """mu0, ||w||_{L1}, ||w||_{p2} and ||D_v w||_{p2} on Sigma_R over random admissible sets."""
    if not 0 < eta <= 1 or p2 < 2:
        raise ValueError("need eta in (0, 1] and p2 >= 2")
    grid = grid or harnack_grid()
    sig = sigma_domains(R)
    rows = []
    for level in range(levels):
        g = grid if level == 0 else grid.refine(2.0 ** level)
        rng = np.random.default_rng(seed)
        ws = np.array(cylinder_weights(g, sig.sigma))
        for k in range(trials):
            E = random_admissible_set(g, eta, rng)
            dual = solve_dual(E, g)
            dvw = np.zeros(g.shape)
            dvw[..., :-1] = np.diff(dual.w, axis=-1) / g.dv
            rows.append(
                {
                    "level": level,
                    "trial": k,
                    "fraction": dual.fraction,
                    "mu0": dual.mu0,
                    "l1": dual.l1,
                    "l1_per_measure": dual.l1 / dual.E_measure if dual.E_measure else 0.0,
                    "w_p2": lp_norm(dual.w, ws, p2),
                    "dvw_p2": lp_norm(dvw, ws, p2),
                }
            )
    last = [r for r in rows if r["level"] == levels - 1]
    mu0 = min(r["mu0"] for r in last)
    return EstimateReport(
        "dual_spreading",
        lhs=mu0,
        rhs=max(r["l1"] for r in last),
        grid_level=levels - 1,
        trials=rows,
        passed=bool(mu0 > 0),
        details={"eta": eta, "p2": p2, "R": R, "sigma_radius": sig.sigma.r},
    )


# --- weak maximum principle ------------------------------------------------------


@dataclass
class MaxPrincipleReport:
    passed: bool
    certified_subsolution: bool
    zero_data: bool
    max_value: float
    location: tuple
    certificate_max_pairing: float


def weak_max_principle_check(
    w0: np.ndarray, coeffs: RoughCoefficients | None = None, grid: Grid | None = None, tol: float = 1e-8
) -> MaxPrincipleReport:
    """Check max w0 <= tol for a candidate subsolution of X_0 - L_0 with zero data.

    The subsolution property is itself certified on the bump dictionary; a
    field that fails the certificate or has nonzero data fails the check.
    """
    w0 = np.asarray(w0, dtype=float)
    if coeffs is None:
        if grid is None:
            raise ValueError("weak_max_principle_check needs either coefficients or a grid")
        coeffs = smooth_operator(grid)
    g = coeffs.grid
    cert = certify_sign(coeffs, w0, tol=1e-6)
    lateral = np.concatenate([w0[:, 0].ravel(), w0[:, -1].ravel(), w0[:, :, 0].ravel(), w0[:, :, -1].ravel()])
    zero_data = bool(np.all(w0[0] <= tol) and np.all(lateral <= tol))
    loc = np.unravel_index(int(np.argmax(w0)), g.shape)
    mx = float(w0[loc])
    loc_phys = (float(g.t[loc[0]]), float(g.x[loc[1]]), float(g.v[loc[2]]))
    passed = cert.is_subsolution and zero_data and mx <= tol
    return MaxPrincipleReport(bool(passed), cert.is_subsolution, zero_data, mx, loc_phys, cert.max_pairing)


# --- vanishing viscosity ------------------------------------------------------------


def radial_cutoff(grid: Grid, r_in: float, r_out: float) -> np.ndarray:
    """chi(x, v): 1 on the ball of radius r_in, 0 outside r_out (time independent)."""
    X, V = np.meshgrid(grid.x, grid.v, indexing="ij")
    return bridge((np.hypot(X, V) - r_in) / (r_out - r_in))


@dataclass
class ViscousResult:
    eps: float
    w: np.ndarray
    energies: dict


def viscous_comparison(eps_visc: float, pb: SmoothProblem, chi: np.ndarray) -> ViscousResult:
    """Solve (X_0 - L_0^ext - eps Lap) w = G + X^t F with L_0^ext = L_0 + div((1 - chi)^2 grad).

    Returns w and the energy norms ||w||, ||D_v w||, ||(1 - chi) grad w|| (L2 over the box).
    """
    if not eps_visc >= 0:
        raise ValueError("viscosity must be nonnegative")
    g = pb.grid
    ext = (1.0 - chi) ** 2
    vpb = SmoothProblem(g, pb.G, pb.F, pb.t_init, pb.domain, a_ext=1.0 + ext + eps_visc, ax_ext=ext + eps_visc)
    w = solve_smooth_ivp(vpb).values
    return ViscousResult(eps_visc, w, energy_norms(w, g, chi, eps_visc))


def energy_norms(w: np.ndarray, g: Grid, chi: np.ndarray, eps: float = 0.0) -> dict:
    wts = domain_weights(g)
    dvw = np.zeros(g.shape)
    dvw[..., :-1] = np.diff(w, axis=-1) / g.dv
    dxw = np.zeros(g.shape)
    dxw[:, :-1] = np.diff(w, axis=1) / g.dx
    grad = np.sqrt(dvw**2 + dxw**2)
    return {
        "l2": lp_norm(w, wts, 2),
        "grad_v": lp_norm(dvw, wts, 2),
        "ext_grad": lp_norm((1 - chi)[None] * grad, wts, 2),
        "visc_grad": math.sqrt(eps) * lp_norm(grad, wts, 2),
    }


def viscosity_sweep(pb: SmoothProblem, chi: np.ndarray, eps_values=(1e-1, 1e-2, 1e-3)) -> EstimateReport:
    """Cauchy differences between consecutive viscosities and the energy norms along the sweep."""
    sols = [viscous_comparison(e, pb, chi) for e in eps_values]
    limit = viscous_comparison(0.0, pb, chi)
    wts = domain_weights(pb.grid)
    diffs = [lp_norm(sols[i].w - sols[i + 1].w, wts, 2) for i in range(len(sols) - 1)]
    to_limit = [lp_norm(s.w - limit.w, wts, 2) for s in sols]
    keys = ("l2", "grad_v", "ext_grad")
    spread = {k: max(s.energies[k] for s in sols) / max(min(s.energies[k] for s in sols), 1e-300) for k in keys}
    decreasing = all(diffs[i + 1] < diffs[i] for i in range(len(diffs) - 1))
    passed = decreasing and all(v <= 2.0 for v in spread.values())
    rows = [{"eps": s.eps, **s.energies, "dist_to_limit": d} for s, d in zip(sols, to_limit)]
    return EstimateReport(
        "vanishing_viscosity",
        lhs=diffs[-1] if diffs else 0.0,
        rhs=diffs[0] if diffs else 0.0,
        trials=rows,
        passed=bool(passed),
        details={"cauchy_differences": diffs, "energy_spread": spread, "decreasing": decreasing},
    )


def truncated_bump_solution(grid: Grid, center=(0.0, 0.0), width: float = 0.5, level: float = 0.0) -> np.ndarray:
    """Initial Gaussian evolved by the smooth operator; used as a manufactured subsolution."""
    X, V = np.meshgrid(grid.x, grid.v, indexing="ij")
    u0 = np.exp(-((X - center[0]) ** 2 + (V - center[1]) ** 2) / width**2)
    u = evolve(smooth_operator(grid), u0, boundary=np.zeros(grid.shape)).values
    if level:
        u = SmoothedTruncation(level / 4, level)(u)
    return u
