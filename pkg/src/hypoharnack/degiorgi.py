"""Level-set iteration for the supremum bound.

Smoothed truncations, the L2 energy estimate, the comparison step that
gains integrability, L1 interpolation over nested cylinders and the
iteration driving ||(u - h_k)_+|| to zero over shrinking cylinders.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Cylinder, make_spatial_cutoff, make_temporal_cutoff
from .grid import Grid, _LATTICE, cylinder_weights, lp_norm
from .kolmogorov import SmoothProblem, smooth_operator, solve_smooth_ivp
from .reports import EstimateReport
from .rough_solver import RoughCoefficients, compose_transform
from .scheme import residual
from .transforms import SmoothedTruncation

INF = math.inf

DEFAULT_EXPONENTS = {
    "p0": 2.25,
    "p1": 2.5,
    "gamma0": 2.0,
    "gamma1": 2.0,
    "q_Lam": INF,
    "q_b": 40.0,
    "q_c": INF,
    "q_d": 20.0,
}


class ExponentError(ValueError):
    """An exponent set that violates one of the integrability conditions."""


def _inv(q: float) -> float:
    return 0.0 if math.isinf(q) else 1.0 / q


def exponent_conditions(ex: dict) -> list[dict]:
    """The four integrability conditions, each with both sides evaluated."""
    p0, g0, g1 = ex["p0"], ex["gamma0"], ex["gamma1"]
    rows = [
        ("1/q_Lam <= min{1/2 - 1/p0, 1/gamma1 - 1/2}", _inv(ex["q_Lam"]), min(0.5 - 1 / p0, 1 / g1 - 0.5)),
        ("1/q_b <= min{(1/gamma0 - 1/p0)/2, 1/2 - 1/p0}", _inv(ex["q_b"]), min((1 / g0 - 1 / p0) / 2, 0.5 - 1 / p0)),
        ("1/q_c <= min{1/gamma0 - 1/2, 1/2 - 1/p0}", _inv(ex["q_c"]), min(1 / g0 - 0.5, 0.5 - 1 / p0)),
        ("1/q_d <= min{1/gamma0 - 1/p0, 1 - 2/p0}", _inv(ex["q_d"]), min(1 / g0 - 1 / p0, 1 - 2 / p0)),
    ]
    return [{"inequality": s, "lhs": l, "rhs": r, "ok": l <= r + 1e-15} for s, l, r in rows]


def check_exponents(ex: dict) -> dict:
    """Fill defaults, then reject exponent sets violating any condition (naming it)."""
    full = {**DEFAULT_EXPONENTS, **(ex or {})}
    full = {k: float(v) for k, v in full.items()}
    p0, p1 = full["p0"], full["p1"]
    if not 2 < p0 < p1:
        raise ExponentError(f"need 2 < p0 < p1, got p0={p0}, p1={p1}")
    if not 1 <= full["gamma0"] <= full["gamma1"] <= 2:
        raise ExponentError("need 1 <= gamma0 <= gamma1 <= 2")
    for row in exponent_conditions(full):
        if not row["ok"]:
            raise ExponentError(f"violated: {row['inequality']} (lhs {row['lhs']:.6g} > rhs {row['rhs']:.6g})")
    return full


def truncation_eval(T: SmoothedTruncation, z):
    """(K, K', K'') of the smoothed truncation at ``z``."""
    return T.eval(z)


# --- nested cylinder quadrature --------------------------------------------


class NestedWeights:
    """Quadrature weights for cylinders sharing the base of ``outer`` and contained in it.

    The lattice samples of every cell near ``outer`` are transported to the
    top time once; weights for any smaller (s, r) are then a cheap mask
    average.  The same 16-point lattice as the global quadrature is used, so
    both agree exactly.  Arrays live on the sub-box ``self.box``.
    """

    def __init__(self, grid: Grid, outer: Cylinder):
        self.grid = grid
        self.outer = outer
        b = outer.base
        t0 = b.t
        t, x, v = grid.t, grid.x, grid.v
        lv = [n for n in range(1, grid.nt + 1) if t[n] > t0 - outer.s and t[n] - grid.dt < t0]
        if not lv:
            raise ValueError("outer cylinder does not meet the grid")
        reach_v = outer.r + grid.dv
        vmask = np.abs(v - b.vel[0]) <= reach_v
        reach_x = outer.r + outer.s * (abs(b.vel[0]) + reach_v) + grid.dx
        # characteristics land at x + tau v; a coarse bound on where they start
        xmask = np.abs(x - b.pos[0]) <= reach_x
        jx, jv = np.flatnonzero(xmask), np.flatnonzero(vmask)
        self.box = (slice(lv[0], lv[-1] + 1), slice(jx[0], jx[-1] + 1), slice(jv[0], jv[-1] + 1))
        ot, ox, ov = _LATTICE[:, 0], _LATTICE[:, 1] - 0.5, _LATTICE[:, 2] - 0.5
        ts = t[lv][:, None] - grid.dt + ot[None, :] * grid.dt  # (levels, 16)
        tau = t0 - ts
        xs = x[self.box[1]][:, None] + ox[None, :] * grid.dx
        vs = v[self.box[2]][:, None] + ov[None, :] * grid.dv
        pos = xs[None, :, None, :] + tau[:, None, None, :] * vs[None, None, :, :]
        self.dist2 = (pos - b.pos[0]) ** 2 + ((vs - b.vel[0]) ** 2)[None, None, :, :]
        self.tau = tau[:, None, None, :]

    def sub(self, arr) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        return np.broadcast_to(arr, self.grid.shape)[self.box] if arr.ndim else np.full(self.shape, float(arr))

    @property
    def shape(self):
        return self.dist2.shape[:3]

    def weights(self, s: float, r: float) -> np.ndarray:
        if s > self.outer.s + 1e-12 or r > self.outer.r + 1e-12:
            raise ValueError("cylinder is not contained in the outer one")
        inside = (self.tau >= 0) & (self.tau < s) & (self.dist2 < r * r)
        return inside.mean(axis=-1) * self.grid.cell_volume

    def full(self, sub_weights: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.shape)
        out[self.box] = sub_weights
        return out


def _node_flux(coeffs: RoughCoefficients) -> np.ndarray:
    """Flux source at the nodes: the mean of the adjacent face values."""
    g = coeffs.grid
    ff = np.stack([coeffs.face_flux_source(n) for n in range(g.nt + 1)])
    out = np.zeros(g.shape)
    out[..., :-1] += 0.5 * ff
    out[..., 1:] += 0.5 * ff
    out[..., 0] *= 2
    out[..., -1] *= 2
    return out


def _dv_squared(v: np.ndarray, dv: float) -> np.ndarray:
    """|D_v v|^2 at the nodes, averaged over the two adjacent faces."""
    q = ((v[..., 1:] - v[..., :-1]) / dv) ** 2
    out = np.zeros(v.shape)
    out[..., :-1] += 0.5 * q
    out[..., 1:] += 0.5 * q
    return out


def _mid(inner: Cylinder, outer: Cylinder) -> tuple[float, float]:
    return 0.5 * (inner.s + outer.s), 0.5 * (inner.r + outer.r)


def energy_estimate(
    v, coeffs_tilde: RoughCoefficients, inner: Cylinder, outer: Cylinder, s1: float | None = None, r1: float | None = None
) -> EstimateReport:
    """Both sides of the L2 energy estimate for the composed field ``v``.

    LHS = ||D_v v||^2 on ``inner``; RHS = (1 + 1/(R - r1) + 1/(S - s1))^2 ||(1 + Lam) v||^2
    + ||f~||^2 + ||c~ v||^2 + ||g~ v||_1, all on ``outer``.
    """
    g = coeffs_tilde.grid
    v = np.asarray(getattr(v, "values", v), dtype=float)
    ms, mr = _mid(inner, outer)
    s1 = ms if s1 is None else s1
    r1 = mr if r1 is None else r1
    w_in = cylinder_weights(g, inner)
    w_out = cylinder_weights(g, outer)
    lhs = float(np.sum(w_in * _dv_squared(v, g.dv)))
    gap = (1 + 1 / (outer.r - r1) + 1 / (outer.s - s1)) ** 2
    Lam = coeffs_tilde.full("Lam")
    terms = {
        "lam_v": lp_norm((1 + Lam) * v, w_out, 2) ** 2,
        "f": lp_norm(_node_flux(coeffs_tilde), w_out, 2) ** 2,
        "c_v": lp_norm(coeffs_tilde.full("c") * v, w_out, 2) ** 2,
        "g_v": lp_norm(coeffs_tilde.full("g") * v, w_out, 1),
    }
    rhs = gap * terms["lam_v"] + terms["f"] + terms["c_v"] + terms["g_v"]
    return EstimateReport("energy", lhs, rhs, details={"gap_factor": gap, "s1": s1, "r1": r1, **terms})


# --- gain of integrability -------------------------------------------------


class ComparisonError(RuntimeError):
    """The comparison solution failed to dominate the cut-off field."""


def _conj(gamma: float) -> float:
    # q with 1/2 + 1/q = 1/gamma
    x = 1 / gamma - 0.5
    return INF if x <= 0 else 1 / x


def gain_integrability(
    u,
    coeffs: RoughCoefficients,
    inner: Cylinder,
    outer: Cylinder,
    eps: float,
    h: float,
    p1: float = 2.5,
    gamma0: float = 2.0,
    gamma1: float = 2.0,
    tol: float = 1e-8,
) -> EstimateReport:
    """Compare tau eta K_{eps,h}(u) with a smooth-problem solution and measure the gain.

    The composed coefficients give the sources G and F of the cut-off field
    z = tau eta v.  The discrete smooth operator applied to z differs from
    G + D_v F by truncation error; its positive part is added to the source,
    so the solution w of the smooth problem dominates z exactly (discrete
    maximum principle).  The size of that remainder is reported.
    """
    g = coeffs.grid
    u = np.asarray(getattr(u, "values", u), dtype=float)
    T = SmoothedTruncation(eps, h)
    comp = compose_transform(coeffs, u, T, mode="sub")
    v = comp.v.values
    ct = comp.coeffs
    s1, r1 = _mid(inner, outer)
    t0 = inner.base.t
    _, eta = make_spatial_cutoff(g, inner.r, r1, (t0 - s1, t0), inner.base, inner.drift)
    tcut = make_temporal_cutoff(t0 - s1, t0 - inner.s)
    tau = np.broadcast_to(tcut(g.t)[:, None, None], g.shape)
    dtau = np.broadcast_to(tcut.time_derivative(g.t)[:, None, None], g.shape)
    deta = np.gradient(eta, g.dv, axis=2)
    dvv = np.gradient(v, g.dv, axis=2)
    ft, cc, gt, a = _node_flux(ct), ct.full("c"), ct.full("g"), ct.full("a")
    G = tau * deta * ft + tau * eta * (cc * dvv - gt) + v * eta * dtau - tau * a * deta * dvv
    F = -tau * eta * ft + tau * eta * (a - 1) * dvv - tau * v * deta

    z = tau * eta * v
    proof_src = -residual(SmoothProblem(g, G=G, F=F).coefficients(), np.zeros(g.shape))
    Rz = residual(smooth_operator(g), z)
    rem = np.maximum(Rz - proof_src, 0.0)
    w = solve_smooth_ivp(SmoothProblem(g, G=G + rem, F=F)).values
    gap_min = float((w - z).min())
    if gap_min < -tol * (1 + np.abs(z).max()):
        raise ComparisonError(f"comparison solution falls below the cut-off field by {-gap_min:.3g}")
    wd = np.full(g.shape, g.cell_volume)
    wd[0] = 0
    src_norm = lp_norm(proof_src, wd, gamma0)
    rem_ratio = lp_norm(rem, wd, gamma0) / src_norm if src_norm > 0 else 0.0

    w_in = cylinder_weights(g, inner)
    w_out = cylinder_weights(g, outer)
    lhs = lp_norm(v, w_in, p1)
    w_norm = lp_norm(w, w_in, p1)
    wM = w_out * (v > 0)
    q0, q1 = _conj(gamma0), _conj(gamma1)
    Lam, c = coeffs.full("Lam"), coeffs.full("c")
    fbar = _node_flux(coeffs) - coeffs.full("b") * u
    gbar = coeffs.full("g") - coeffs.full("d") * u
    gap = 1 + 1 / (outer.s - inner.s) + 1 / (outer.r - inner.r)
    coef = 1 + lp_norm(Lam, wM, q1) + lp_norm(c, wM, q0)
    main = (
        lp_norm((1 + Lam) * v, wM, 2)
        + lp_norm(fbar, wM, 2)
        + lp_norm(c * v, wM, 2)
        + math.sqrt(lp_norm(gbar * v, wM, 1))
    )
    low = lp_norm(gbar, wM, gamma0) + lp_norm(fbar * (v <= 2 * eps), wM, 2 * gamma0) ** 2 / eps
    rhs = gap**2 * coef * main + gap * low
    C2 = lhs / rhs if rhs > 0 else 0.0
    return EstimateReport(
        "gain_integrability",
        lhs,
        rhs,
        passed=bool(lhs <= w_norm * (1 + 1e-9) + 1e-14),
        details={
            "w_norm": w_norm,
            "C2": C2,
            "ordering_min": gap_min,
            "remainder_ratio": rem_ratio,
            "s1": s1,
            "r1": r1,
            "eps": eps,
            "h": h,
        },
        arrays={"v": v, "w": w, "z": z, "remainder": rem},
    )


# --- L1 interpolation -----------------------------------------------------


def interpolation_theta(p0: float, p1: float) -> float:
    """theta with 1/p0 = (1 - theta) + theta/p1."""
    if not 1 < p0 < p1:
        raise ValueError("need 1 < p0 < p1")
    return (1 - 1 / p0) / (1 - 1 / p1)


def interpolation_check(values, weights, p0: float, p1: float) -> tuple[float, float]:
    """(||v||_p0, ||v||_1^(1-theta) ||v||_p1^theta); the first never exceeds the second."""
    th = interpolation_theta(p0, p1)
    return lp_norm(values, weights, p0), lp_norm(values, weights, 1) ** (1 - th) * lp_norm(values, weights, p1) ** th


def series_terms(theta: float, beta: float, k: int) -> np.ndarray:
    i = np.arange(1, k + 1)
    e = 2 / (1 - theta)
    # logs keep large exponents finite
    logs = (i - 1) * math.log(theta) + e * np.log1p(1 / ((1 - beta) * beta ** (i - 1.0)))
    return np.exp(np.minimum(logs, 700.0))


def series_converges(theta: float, beta: float) -> bool:
    """Ratio test: consecutive terms tend to theta beta^(-2/(1 - theta))."""
    return theta * beta ** (-2 / (1 - theta)) < 1


def default_beta(theta: float) -> float:
    """Halfway between the convergence threshold theta^((1-theta)/2) and 1."""
    return 0.5 * (1 + theta ** ((1 - theta) / 2))


def l1_interpolation(
    u,
    coeffs: RoughCoefficients,
    inner: Cylinder,
    outer: Cylinder,
    eps: float,
    h: float,
    p0: float = 2.25,
    p1: float = 2.5,
    q_d: float = 20.0,
    beta: float | None = None,
    steps: int = 2,
    terms: int = 400,
) -> EstimateReport:
    """Measured C3 in ||v||_p1(inner) <= C3 P^alpha ||v||_1(outer) + C3 Q for v = K_{eps,h}(u).

    The comparison step runs between the first ``steps`` consecutive scales
    sigma_i = 1 - beta^i.  With a divergent series C3 is reported infinite
    together with the first index where the terms stop decreasing.
    """
    g = coeffs.grid
    u = np.asarray(getattr(u, "values", u), dtype=float)
    theta = interpolation_theta(p0, p1)
    alpha = 1 / (1 - theta)
    beta = default_beta(theta) if beta is None else beta
    converges = series_converges(theta, beta)
    st = series_terms(theta, beta, terms)
    grow = np.flatnonzero(st[1:] >= st[:-1])
    offending = int(grow[0] + 1) if (not converges and grow.size) else None

    v = SmoothedTruncation(eps, h)(u)
    S, s, R, r = outer.s, inner.s, outer.r, inner.r

    def cyl(sig):
        return inner.with_scales(s + sig * (S - s), r + sig * (R - r))

    sig = [1 - beta**i for i in range(steps + 1)]
    Z = [lp_norm(v, cylinder_weights(g, cyl(x)), p1) for x in sig]
    C2 = []
    for i in range(1, steps + 1):
        rep = gain_integrability(u, coeffs, cyl(sig[i - 1]), cyl(sig[i]), eps, h, p1=p1)
        C2.append(rep.details["C2"])

    w_out = cylinder_weights(g, outer)
    wM = w_out * (v > 0)
    qbar0 = 1 / (0.5 - 1 / p0)
    p0s = p0 / (p0 - 1)
    Lam, b, c, d, gg = (coeffs.full(k) for k in ("Lam", "b", "c", "d", "g"))
    f = _node_flux(coeffs)
    gap = 1 + 1 / (S - s) + 1 / (R - r)
    lead = 1 + lp_norm(Lam, wM, INF) + lp_norm(c, wM, INF)
    P = gap**2 * lead * (
        1
        + lp_norm(Lam, wM, qbar0)
        + lp_norm(c, wM, qbar0)
        + lp_norm(b, wM, qbar0)
        + lp_norm(d, wM, q_d)
        + lp_norm(gg, wM, p0s)
    )
    Q = gap**2 * lead * (
        lp_norm(f, wM, 2)
        + lp_norm(f, wM, 4) ** 2 / eps
        + (eps + h) * (lp_norm(b, wM, 2) + (eps + h) / eps * lp_norm(b, wM, 4) ** 2 + lp_norm(d, wM, 2))
        + lp_norm(gg, wM, 2)
    )
    lhs = lp_norm(v, cylinder_weights(g, inner), p1)
    base = P**alpha * lp_norm(v, w_out, 1) + Q
    if not converges:
        C3 = INF
    else:
        C3 = lhs / base if base > 0 else 0.0
    return EstimateReport(
        "l1_interpolation",
        lhs,
        base,
        passed=converges,
        details={
            "theta": theta,
            "alpha": alpha,
            "beta": beta,
            "converges": converges,
            "offending_scale": offending,
            "series_sum": float(st.sum()) if converges else INF,
            "C3": C3,
            "P": P,
            "Q": Q,
            "sigma": sig,
            "Z": Z,
            "C2_steps": C2,
        },
    )


# --- supremum bound ----------------------------------------------------------


@dataclass
class IterationState:
    """One step of the level-set iteration for a fixed target level D."""

    k: int
    h: float
    eps: float
    Z: float  # ||v_k||_{p0} on C_{k+1}
    M: float  # |C_k cap {v_k > 0}|
    D: float
    ratio: float  # Z_k / Z_{k-1}^(1 + delta)
    inclusion: bool = True  # {v_{k+1} > 0} inside {v_k > (h_{k+1} - h_k)/2}
    monotone: bool = True  # v_{k+1} <= v_k
    chebyshev: tuple = (0.0, 0.0)  # |M_k|^(1/p0) <= 2 Z_{k-1} / (h_k - h_{k-1})
    bounds: dict = field(default_factory=dict)  # name -> (lhs, rhs) of the Hoelder steps

    @property
    def chebyshev_ok(self) -> bool:
        lhs, rhs = self.chebyshev
        return lhs <= rhs * (1 + 1e-12) + 1e-300

    @property
    def bounds_ok(self) -> bool:
        return all(l <= r * (1 + 1e-9) + 1e-300 for l, r in self.bounds.values())


TRACE_COLUMNS = ("k", "h_k", "eps_k", "Z_k", "M_k", "ratio")


@dataclass
class SupBoundResult:
    sup_estimate: float
    D: float
    N: float
    delta_S: float
    C_S: float
    beta: float
    converged: bool
    trace: list
    true_max: float
    exponents: dict
    searched: list = field(default_factory=list)  # (D, converged) in search order

    @property
    def invariants_ok(self) -> bool:
        return all(s.inclusion and s.monotone and s.chebyshev_ok and s.bounds_ok for s in self.trace)

    @property
    def sound(self) -> bool:
        final_eps = self.trace[-1].eps * self.N if self.trace else 0.0
        return self.true_max <= self.sup_estimate + final_eps + 1e-12 * max(1.0, abs(self.sup_estimate))

    def trace_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\r\n")
        wr.writerow(TRACE_COLUMNS)
        for s in self.trace:
            wr.writerow([s.k, repr(s.h), repr(s.eps), repr(s.Z), repr(s.M), repr(s.ratio)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "trace"}
        d["trace"] = [
            {**asdict(s), "chebyshev_ok": s.chebyshev_ok, "bounds_ok": s.bounds_ok} for s in self.trace
        ]
        d["invariants_ok"] = self.invariants_ok
        d["sound"] = self.sound
        return d


def coefficient_size(coeffs: RoughCoefficients, weights: np.ndarray, ex: dict) -> float:
    """delta_S = ||Lam||_{q_Lam} + ||b||_{q_b} + ||c||_{q_c} + ||d||_{q_d} over the weighted set."""
    return (
        lp_norm(coeffs.full("Lam"), weights, ex["q_Lam"])
        + lp_norm(coeffs.full("b"), weights, ex["q_b"])
        + lp_norm(coeffs.full("c"), weights, ex["q_c"])
        + lp_norm(coeffs.full("d"), weights, ex["q_d"])
    )


class _Iteration:
    """Data of one run restricted to the sub-box of the outer cylinder."""

    def __init__(self, ubar, nested: NestedWeights, inner: Cylinder, outer: Cylinder, p0: float, K: int):
        self.ubar = ubar
        self.p0 = p0
        self.K = K
        S, s, R, r = outer.s, inner.s, outer.r, inner.r
        self.W = [nested.weights(s + 2.0**-k * (S - s), r + 2.0**-k * (R - r)) for k in range(K + 2)]
        # nodes carrying weight in C_{k+1}, for the fast norm used by the search
        self._sel = []
        for k in range(K + 1):
            idx = np.flatnonzero(self.W[k + 1])
            self._sel.append((self.ubar.ravel()[idx], self.W[k + 1].ravel()[idx]))

    @staticmethod
    def levels(D: float, k: int) -> tuple[float, float]:
        return D * (1 - 2.0**-k), D / 4 * 2.0**-k

    def field(self, D: float, k: int) -> np.ndarray:
        h, e = self.levels(D, k)
        return SmoothedTruncation(e, h)(self.ubar)

    def Z(self, vk: np.ndarray, k: int) -> float:
        return lp_norm(vk, self.W[k + 1], self.p0)

    def Z_fast(self, D: float, k: int) -> float:
        h, e = self.levels(D, k)
        uk, wk = self._sel[k]
        live = uk > h - e
        if not live.any():
            return 0.0
        vk = SmoothedTruncation(e, h)(uk[live])
        return float(np.sum(wk[live] * vk**self.p0) ** (1 / self.p0))

    def converges(self, D: float, rel: float) -> tuple[bool, int]:
        Z0 = self.Z_fast(D, 0)
        if Z0 == 0:
            return True, 0
        for k in range(1, self.K + 1):
            if self.Z_fast(D, k) < rel * Z0:
                return True, k
        return False, self.K


def supremum_bound(
    u,
    coeffs: RoughCoefficients,
    inner: Cylinder,
    outer: Cylinder,
    exponents: dict | None = None,
    beta: float = 1.0,
    max_steps: int = 25,
    rel_tol: float = 1e-10,
    D_floor: float = 2.0**-16,
    D_cap: float = 2.0**16,
    bisect: int = 40,
) -> SupBoundResult:
    """Certified bound sup_{inner} u <= D N from the level-set iteration.

    ``u`` is normalised by N = ||u||_1 + ||f||_{q_b} + ||g||_{q_d} on ``outer``.
    For a target D the levels h_k = D(1 - 2^-k), widths eps_k = (D/4) 2^-k and
    cylinders shrinking from ``outer`` to ``inner`` define v_k = K_{eps_k,h_k}(u/N);
    the iteration is accepted when Z_k < rel_tol Z_0 for some k <= max_steps.
    The smallest accepted D is found by doubling/halving from 1 and bisection.
    C_S = D / (1 + delta_S)^beta for the supplied ``beta``.
    """
    ex = check_exponents(exponents or {})
    p0, p1 = ex["p0"], ex["p1"]
    g = coeffs.grid
    u = np.asarray(getattr(u, "values", u), dtype=float)
    nested = NestedWeights(g, outer)
    w_out = nested.full(nested.weights(outer.s, outer.r))
    N = lp_norm(u, w_out, 1) + lp_norm(_node_flux(coeffs), w_out, ex["q_b"]) + lp_norm(coeffs.full("g"), w_out, ex["q_d"])
    delta_S = coefficient_size(coeffs, w_out, ex)
    w_in = nested.weights(inner.s, inner.r)
    u_sub = nested.sub(u)
    true_max = float(u_sub[w_in > 0].max()) if np.any(w_in > 0) else -INF
    if N == 0:
        return SupBoundResult(0.0, 0.0, 0.0, delta_S, 0.0, beta, True, [], true_max, ex)

    it = _Iteration(u_sub / N, nested, inner, outer, p0, max_steps)
    searched = []

    def test(D):
        ok, _ = it.converges(D, rel_tol)
        searched.append((D, ok))
        return ok

    D = 1.0
    if test(D):
        lo, hi = None, D
        while hi / 2 >= D_floor:
            if test(hi / 2):
                hi = hi / 2
            else:
                lo = hi / 2
                break
    else:
        lo, hi = D, None
        while lo * 2 <= D_cap:
            if test(lo * 2):
                hi = lo * 2
                break
            lo = lo * 2
    if hi is None:
        trace = _trace(it, lo, nested, coeffs, u, N, ex, rel_tol)
        return SupBoundResult(INF, INF, N, delta_S, INF, beta, False, trace, true_max, ex, searched)
    if lo is not None:
        for _ in range(bisect):
            mid = 0.5 * (lo + hi)
            if test(mid):
                hi = mid
            else:
                lo = mid
    D = hi
    trace = _trace(it, D, nested, coeffs, u, N, ex, rel_tol)
    C_S = D / (1 + delta_S) ** beta
    return SupBoundResult(D * N, D, N, delta_S, C_S, beta, True, trace, true_max, ex, searched)


def _trace(it: _Iteration, D: float, nested: NestedWeights, coeffs, u, N, ex, rel_tol) -> list[IterationState]:
    """Full trace for level D with the invariants and Hoelder steps of each step."""
    p0, p1, qd, qb = ex["p0"], ex["p1"], ex["q_d"], ex["q_b"]
    delta = 1 - p0 / p1
    qbar0 = 1 / (0.5 - 1 / p0)
    Lam = nested.sub(coeffs.full("Lam"))
    c = nested.sub(coeffs.full("c"))
    fbar = nested.sub(_node_flux(coeffs) - coeffs.full("b") * u) / N
    gbar = nested.sub(coeffs.full("g") - coeffs.full("d") * u) / N
    states = []
    _, kend = it.converges(D, rel_tol)
    kend = min(it.K, kend + 1)
    prev_v, prev_Z = None, None
    for k in range(kend + 1):
        h, e = it.levels(D, k)
        T = SmoothedTruncation(e, h)
        vk, K1, _ = T.eval(it.ubar)
        Zk = it.Z(vk, k)
        Wk, Wk1 = it.W[k], it.W[k + 1]
        pos = vk > 0
        Mk = float(Wk[pos].sum())
        st = IterationState(k, h, e, Zk, Mk, D, math.nan)
        if prev_v is not None:
            hp, _ = it.levels(D, k - 1)
            step = h - hp
            st.ratio = Zk / prev_Z ** (1 + delta) if prev_Z > 0 else (0.0 if Zk == 0 else INF)
            st.inclusion = bool(np.all(prev_v[pos] > step / 2))
            st.monotone = bool(np.all(vk <= prev_v))
            st.chebyshev = (Mk ** (1 / p0), 2 / step * prev_Z)
        Mk1 = float(Wk1[pos].sum())
        WM = Wk * pos
        nv0 = lp_norm(vk, Wk, p0)
        st.bounds = {
            "holder_p0_p1": (Zk, Mk1 ** (1 / p0 - 1 / p1) * lp_norm(vk, Wk1, p1)),
            "lam_v": (lp_norm((1 + Lam) * vk, Wk, 2), lp_norm(1 + Lam, WM, qbar0) * nv0),
            "c_v": (lp_norm(c * vk, Wk, 2), lp_norm(c, WM, qbar0) * nv0),
            "f_bar": (lp_norm(K1 * fbar, Wk, 2), lp_norm(fbar, WM, qb) * Mk ** (0.5 - _inv(qb))),
            "g_bar_v": (lp_norm(K1 * gbar * vk, Wk, 1), lp_norm(gbar, WM, qd) * nv0 * Mk ** (1 - _inv(qd) - 1 / p0)),
            "v_l2": (lp_norm(vk, Wk, 2), nv0 * Mk ** (0.5 - 1 / p0)),
        }
        states.append(st)
        prev_v, prev_Z = vk, Zk
    return states


def fit_sup_constants(delta_S, D) -> tuple[float, float]:
    """(C_S, beta) with D <= C_S (1 + delta_S)^beta over all cases.

    beta is the least-squares slope of log D against log(1 + delta_S)
    (clipped at 0); C_S is then the smallest constant covering every case.
    """
    x = np.log1p(np.asarray(delta_S, dtype=float))
    y = np.log(np.asarray(D, dtype=float))
    beta = 0.0
    if x.size > 1 and np.ptp(x) > 0:
        beta = max(float(np.polyfit(x, y, 1)[0]), 0.0)
    return float(np.exp(np.max(y - beta * x))), beta
