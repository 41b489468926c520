"""Rough coefficient fields, weak application of P and sign certificates.

Everything here works on the discrete operator of :mod:`hypoharnack.scheme`.
The weak pairing is written out by summation by parts, so for test functions
vanishing on the first and last time levels and on the lateral boundary it
equals ``sum (P_h u) phi dV`` exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Grid, GridField
from .scheme import RoughCoefficients, SolverError, residual, solve

__all__ = [
    "RoughCoefficients",
    "SolverError",
    "EllipticityReport",
    "check_ellipticity",
    "make_coefficients",
    "apply_weak",
    "evolve",
    "Sign",
    "WeakResidual",
    "certify_field",
    "certify_sign",
    "Composition",
    "compose_transform",
]


# --- coefficient recipes -----------------------------------------------------


def _cell_pattern(grid: Grid, cell: float, rng=None) -> np.ndarray:
    """Cellwise constant pattern on (pos, vel): 0/1 checkerboard or uniform [0, 1) per cell."""
    ix = np.floor((grid.x + grid.x_half) / cell).astype(int)
    iv = np.floor((grid.v + grid.v_half) / cell).astype(int)
    if rng is None:
        return ((ix[:, None] + iv[None, :]) % 2).astype(float)
    table = rng.random((ix.max() + 1, iv.max() + 1))
    return table[ix[:, None], iv[None, :]]


def _lower_order(entry, grid: Grid, cell: float, rng) -> np.ndarray | float:
    if entry is None:
        return 0.0
    if isinstance(entry, (int, float)):
        return float(entry)
    amp = float(entry.get("amplitude", 0.0))
    sign = entry.get("sign", "any")
    kind = entry.get("kind", "random")
    if kind == "constant":
        vals = amp
    else:
        pat = _cell_pattern(grid, cell, rng if kind == "random" else None)
        vals = amp * (2 * pat - 1)
    if sign == "nonpositive":
        vals = -np.abs(vals)
    elif sign == "nonnegative":
        vals = np.abs(vals)
    return vals


def make_coefficients(recipe: dict, grid: Grid) -> RoughCoefficients:
    """Build coefficients from a recipe.

    ``kind`` is ``identity`` (a = lam), ``checkerboard`` (a alternates between
    lam and Lam on square cells of side ``cell``) or ``random`` (a uniform in
    [lam, Lam] per cell).  ``Lam`` is the largest value of a; the bound field
    stored on the coefficients is ``n * Lam`` so that |a| <= Lam_field / n.
    ``lower_order`` maps b, c, d, f, g to a constant or to
    ``{kind: random|checkerboard|constant, amplitude, sign}``.
    """
    kind = recipe.get("kind", "identity")
    lam = float(recipe.get("lam", 1.0))
    Lam = float(recipe.get("Lam", lam))
    cell = float(recipe.get("cell", 0.25))
    rng = np.random.default_rng(recipe.get("seed", 0))
    if Lam < lam:
        raise ValueError("recipe needs Lam >= lam")
    if kind == "identity":
        a = lam
    elif kind == "checkerboard":
        a = lam + (Lam - lam) * _cell_pattern(grid, cell)
    elif kind == "random":
        a = lam + (Lam - lam) * _cell_pattern(grid, cell, rng)
    else:
        raise ValueError(f"unknown coefficient kind {kind!r}")
    lower = recipe.get("lower_order") or {}
    extra = {k: _lower_order(lower.get(k), grid, cell, rng) for k in ("b", "c", "d", "f", "g")}
    return RoughCoefficients(grid, a=a, lam=lam, Lam=2.0 * Lam, meta={"recipe": dict(recipe)}, **extra)


# --- ellipticity ----------------------------------------------------------


@dataclass
class EllipticityReport:
    eig_slack: float  # min over cells of lambda_min(sym a) - lam
    bound_ratio: float  # max over cells of |a_ij| n / Lam
    violating: int
    first_violation: tuple | None

    @property
    def passed(self) -> bool:
        return self.eig_slack >= -1e-12 and self.bound_ratio <= 1 + 1e-12


def _ellipticity(a, lam, Lam, n) -> EllipticityReport:
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    eig = np.linalg.eigvalsh(sym)[..., 0]
    Lam = np.broadcast_to(np.asarray(Lam, dtype=float), eig.shape)
    ratio = np.abs(a).max(axis=(-1, -2)) * n / Lam
    bad = (eig - lam < -1e-12) | (ratio > 1 + 1e-12)
    first = tuple(int(i) for i in np.argwhere(bad)[0]) if bad.any() else None
    return EllipticityReport(float((eig - lam).min()), float(ratio.max()), int(bad.sum()), first)


def check_ellipticity(coeffs: RoughCoefficients | None = None, *, a=None, lam=None, Lam=None, n=None):
    """Ellipticity slack of a coefficient set, or of an explicit matrix field ``a`` (..., m, m)."""
    if coeffs is not None:
        a = coeffs.full("a")[..., None, None]
        lam, Lam, n = coeffs.lam, coeffs.Lam, coeffs.n
        Lam = np.broadcast_to(np.asarray(Lam, dtype=float), coeffs.grid.shape)
    else:
        a = np.asarray(a, dtype=float)
        if a.ndim < 2:
            a = a[..., None, None]
    return _ellipticity(a, lam, Lam, n)


# --- weak pairing ------------------------------------------------------------


def _check_support(phi: np.ndarray) -> None:
    if np.any(phi[0] != 0) or np.any(phi[-1] != 0):
        raise ValueError("test function must vanish on the first and last time levels")
    if np.any(phi[:, 0] != 0) or np.any(phi[:, -1] != 0) or np.any(phi[:, :, 0] != 0) or np.any(phi[:, :, -1] != 0):
        raise ValueError("test function must vanish on the lateral boundary")


def apply_weak(coeffs: RoughCoefficients, u: np.ndarray, phi: np.ndarray) -> float:
    """Discrete weak pairing of P u with a compactly supported test function.

    sum dV [ -u D_t^+ phi - u (transport adjoint) phi + F . D_v phi + (-c D_up u - d u + g) phi ]
    where F is the discrete face flux a D_v u + b m(u) - f.
    """
    g = coeffs.grid
    u = np.asarray(u, dtype=float)
    phi = np.asarray(phi, dtype=float)
    _check_support(phi)
    dt, dx, dv = g.dt, g.dx, g.dv
    total = 0.0
    # time: sum_{n>=1} (u^n - u^{n-1}) phi^n = -sum_{n>=0} u^n (phi^{n+1} - phi^n)
    total += -np.sum(u[:-1] * (phi[1:] - phi[:-1])) / dt
    vel = g.v[None, :]
    vp, vm = np.maximum(vel, 0), np.maximum(-vel, 0)
    for n in range(1, g.nt + 1):
        un, pn = u[n], phi[n]
        # upwind transport moved onto phi
        tr = np.sum(un[:-1] * vp * (pn[:-1] - pn[1:])) + np.sum(un[1:] * vm * (pn[1:] - pn[:-1]))
        total += tr / dx
        a, b, c = coeffs.at("a", n), coeffs.at("b", n), coeffs.at("c", n)
        d, gg = coeffs.at("d", n), coeffs.at("g", n)
        af = 0.5 * (a[:, 1:] + a[:, :-1])
        bf = 0.5 * (b[:, 1:] + b[:, :-1])
        flux = af * (un[:, 1:] - un[:, :-1]) / dv + bf * 0.5 * (un[:, 1:] + un[:, :-1]) - coeffs.face_flux_source(n)
        total += np.sum(flux * (pn[:, 1:] - pn[:, :-1])) / dv
        fwd = np.zeros_like(un)
        bwd = np.zeros_like(un)
        fwd[:, :-1] = (un[:, 1:] - un[:, :-1]) / dv
        bwd[:, 1:] = (un[:, 1:] - un[:, :-1]) / dv
        lower = -np.maximum(c, 0) * fwd + np.maximum(-c, 0) * bwd - d * un + gg
        total += np.sum(lower * pn)
        if coeffs.a_x is not None:
            ax = coeffs.at("a_x", n)
            axf = 0.5 * (ax[1:] + ax[:-1])
            total += np.sum(axf * (un[1:] - un[:-1]) * (pn[1:] - pn[:-1])) / dx**2
    return float(total * g.cell_volume)


# --- evolution -----------------------------------------------------------------


def evolve(
    coeffs: RoughCoefficients,
    u0: np.ndarray,
    source: np.ndarray | None = None,
    boundary: np.ndarray | None = None,
    tol: float = 1e-8,
) -> GridField:
    """Solve P_h u = source (default 0) on ``coeffs.grid`` from initial data ``u0``.

    The time window is the grid's [t_lo, t_hi].  Lateral values are Dirichlet,
    frozen at those of ``u0`` unless ``boundary`` is given.  The returned field's
    meta records the scheme residual, which is checked against ``tol`` relative
    to the data scale.
    """
    ell = check_ellipticity(coeffs)
    if not ell.passed:
        raise SolverError(f"ellipticity check failed: slack {ell.eig_slack:.3g}, bound ratio {ell.bound_ratio:.3g}")
    marg = coeffs.solvability()
    if marg["face_margin"] < 0 or marg["diagonal_margin"] <= 0:
        raise SolverError(f"implicit step is not an M-matrix: {marg}")
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (coeffs.grid.nx, coeffs.grid.nv):
        u0 = np.asarray(u0)[0] if u0.shape == coeffs.grid.shape else u0
    u, info = solve(coeffs, u0, source, boundary)
    R = residual(coeffs, u)
    if source is not None:
        R[:, 1:-1, 1:-1][1:] -= source[1:, 1:-1, 1:-1]
    scale = 1.0 + np.abs(u).max() / coeffs.grid.dt
    res = float(np.abs(R).max())
    if res > tol * scale:
        raise SolverError(f"scheme residual {res:.3g} exceeds tolerance; per-step sizes {info['max_abs_per_step'][:5]}")
    return GridField(coeffs.grid, u, {"residual": res, **marg})


# --- sign certificates ---------------------------------------------------------

DICTIONARY_SCALES = (2, 4, 8)


class Sign(str, enum.Enum):
    SUBSOLUTION = "Subsolution"
    SUPERSOLUTION = "Supersolution"
    NEITHER = "Neither"


@dataclass
class WeakResidual:
    """Pairings of a residual with the bump dictionary, normalised by the L1 norm of each bump."""

    max_pairing: float
    min_pairing: float
    worst_sub: dict
    worst_super: dict
    tol: float
    n_tests: int
    per_scale: dict = field(default_factory=dict)

    @property
    def is_subsolution(self) -> bool:
        return self.max_pairing <= self.tol

    @property
    def is_supersolution(self) -> bool:
        return self.min_pairing >= -self.tol

    @property
    def certificate(self) -> Sign:
        if self.is_subsolution:
            return Sign.SUBSOLUTION
        if self.is_supersolution:
            return Sign.SUPERSOLUTION
        return Sign.NEITHER

    @property
    def worst_case(self) -> float:
        return max(self.max_pairing, -self.min_pairing)


def tent(width: int) -> np.ndarray:
    k = np.arange(-width + 1, width)
    return 1.0 - np.abs(k) / width


def bump_function(grid: Grid, center: tuple[int, int, int], width: int) -> np.ndarray:
    """The dictionary element: tensor product of tents of half-width ``width`` nodes."""
    phi = np.zeros(grid.shape)
    tk = tent(width)
    sl = []
    for c in center:
        sl.append(slice(c - width + 1, c + width))
    phi[tuple(sl)] = tk[:, None, None] * tk[None, :, None] * tk[None, None, :]
    return phi


def certify_field(
    R: np.ndarray,
    grid: Grid,
    tol: float = 1e-6,
    dictionary_size: int | None = None,
    region: np.ndarray | None = None,
    scales=DICTIONARY_SCALES,
) -> WeakResidual:
    """Pair the nodal residual ``R`` with every tent bump whose support stays inside the interior.

    ``region`` restricts bump centres; ``dictionary_size`` keeps an evenly
    strided subset of that many bumps per scale.
    """
    R = np.asarray(R, dtype=float)
    hi, lo = -np.inf, np.inf
    wsub, wsup = {}, {}
    per_scale = {}
    total = 0
    for w in scales:
        tk = tent(w)
        pair = R
        for ax in range(3):
            pair = ndimage.correlate1d(pair, tk, axis=ax, mode="constant")
        norm = tk.sum() ** 3
        valid = np.zeros(grid.shape, dtype=bool)
        valid[w : grid.nt + 1 - w, w : grid.nx - w, w : grid.nv - w] = True
        if region is not None:
            valid &= region
        idx = np.flatnonzero(valid)
        if idx.size == 0:
            continue
        if dictionary_size is not None and idx.size > dictionary_size:
            idx = idx[np.linspace(0, idx.size - 1, dictionary_size).round().astype(int)]
        vals = pair.ravel()[idx] / norm
        total += idx.size
        kmax, kmin = int(np.argmax(vals)), int(np.argmin(vals))
        per_scale[w] = (float(vals[kmax]), float(vals[kmin]))
        if vals[kmax] > hi:
            hi = float(vals[kmax])
            wsub = {"center": [int(i) for i in np.unravel_index(idx[kmax], grid.shape)], "width": w}
        if vals[kmin] < lo:
            lo = float(vals[kmin])
            wsup = {"center": [int(i) for i in np.unravel_index(idx[kmin], grid.shape)], "width": w}
    if total == 0:
        raise ValueError("no dictionary bump fits inside the certification region")
    return WeakResidual(hi, lo, wsub, wsup, tol, total, per_scale)


def certify_sign(
    coeffs: RoughCoefficients,
    u: np.ndarray,
    dictionary_size: int | None = None,
    tol: float = 1e-6,
    region: np.ndarray | None = None,
    extra: np.ndarray | None = None,
) -> WeakResidual:
    """Sign certificate of P u (plus an optional nodal ``extra`` term) over the bump dictionary."""
    R = residual(coeffs, u)
    if extra is not None:
        R = R + extra * coeffs.grid.interior_mask()
    return certify_field(R, coeffs.grid, tol, dictionary_size, region)


# --- composition with a convex transform -------------------------------------------


@dataclass
class Composition:
    v: GridField
    coeffs: RoughCoefficients
    defect: np.ndarray  # (lam/2) sum over faces of Bregman gaps / dv^2
    penalty: np.ndarray  # the subtracted kappa w^2 / (4 lam) part of the new g
    gradient_energy: np.ndarray  # (lam/2) |D_v v|^2 averaged over the two faces
    mode: str


def _bregman(Phi, y, x):
    Py, P1y, _ = Phi.eval(y)
    Px, P1x, _ = Phi.eval(x)
    return Py - Px - P1x * (y - x)


def compose_transform(
    coeffs: RoughCoefficients, u: np.ndarray, Phi, mode: str | None = None, lam: float | None = None
) -> Composition:
    """Coefficients for v = Phi(u) such that P~_h v <= Phi'(u) P_h u - defect at every interior node.

    The new operator keeps a and c, has b~ = d~ = 0, a face flux source
    f~ (reducing to f - b u for the identity) and
    g~ = Phi'(u)(g - d u) - sum_faces kappa w^2 / (4 lam), where w = f - b m(u)
    and kappa is the difference quotient of Phi'.  ``mode`` is ``sub``
    (requires Phi' >= 0) or ``super`` (Phi' <= 0); Phi'' >= 0 is always required.
    """
    g = coeffs.grid
    lam = coeffs.lam if lam is None else lam
    u = np.asarray(u, dtype=float)
    P, P1, P2 = Phi.eval(u)
    if np.any(P2 < -1e-12):
        raise ValueError("transform must be convex on the range of u")
    if mode is None:
        mode = "sub" if np.all(P1 >= 0) else ("super" if np.all(P1 <= 0) else None)
    if mode == "sub" and np.any(P1 < 0) or mode == "super" and np.any(P1 > 0) or mode is None:
        raise ValueError("transform derivative has the wrong sign for the requested mode")

    dv = g.dv
    a = coeffs.full("a")
    b = coeffs.full("b")
    af = 0.5 * (a[..., 1:] + a[..., :-1])
    bf = 0.5 * (b[..., 1:] + b[..., :-1])
    ff = np.stack([coeffs.face_flux_source(n) for n in range(g.nt + 1)])
    ul, ur = u[..., :-1], u[..., 1:]
    w = ff - bf * 0.5 * (ul + ur)
    delta = ur - ul
    dP1 = P1[..., 1:] - P1[..., :-1]
    safe = np.where(delta != 0, delta, 1.0)
    kappa = np.where(delta != 0, np.maximum(dP1 / safe, 0.0), 0.0)
    ap = af - lam / 2
    B_rl = _bregman(Phi, ur, ul)  # gap of the right node seen from the left
    B_lr = _bregman(Phi, ul, ur)
    S = dP1 * (w - ap * delta / dv)
    f_new = 0.5 * S + ap * B_rl / dv + P1[..., :-1] * w

    face_pen = kappa * w**2 / (4 * lam)
    penalty = np.zeros(g.shape)
    penalty[..., :-1] += face_pen
    penalty[..., 1:] += face_pen
    g_new = P1 * (coeffs.full("g") - coeffs.full("d") * u) - penalty

    defect = np.zeros(g.shape)
    defect[..., :-1] += B_rl
    defect[..., 1:] += B_lr
    defect *= lam / 2 / dv**2
    dvv = (P[..., 1:] - P[..., :-1]) / dv
    grad = np.zeros(g.shape)
    grad[..., :-1] += 0.5 * dvv**2
    grad[..., 1:] += 0.5 * dvv**2
    grad *= lam / 2

    new = RoughCoefficients(
        g, a=coeffs.a, b=0.0, c=coeffs.c, d=0.0, f=0.0, g=g_new, lam=coeffs.lam, Lam=coeffs.Lam,
        f_face=f_new, a_x=coeffs.a_x, meta={**coeffs.meta, "composed": type(Phi).__name__},
    )
    return Composition(GridField(g, P), new, defect, penalty, grad, mode)
