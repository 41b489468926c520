"""Implicit finite-volume discretisation of the rough kinetic operator (one pos, one vel axis).

The operator is

    P u = d_t u + v d_x u - d_v (a d_v u + b u - f) - c d_v u - d u + g

discretised at interior nodes with backward Euler in time, upwind transport,
a conservative flux in ``v`` (face coefficients are the means of the two
adjacent node values, ``b u`` uses the face average of ``u``) and an upwinded
``c`` term.  Under ``a >= |b| dv / 2`` and ``1/dt - d - (b_+ - b_-)/dv > 0``
the implicit matrix is an M-matrix, which gives the discrete maximum principle.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid

_FIELDS = ("a", "b", "c", "d", "f", "g")


@dataclass
class RoughCoefficients:
    """Coefficients of P sampled at the nodes of ``grid``.

    Every field is a scalar, an ``(nx, nv)`` array (time independent) or an
    ``(nt + 1, nx, nv)`` array.  ``f_face`` optionally prescribes the flux
    source directly on the v-faces, shape ``(.., nx, nv - 1)``; ``a_x`` adds a
    pos-diffusion ``-d_x(a_x d_x u)`` (used only by the viscous regularisation).
    """

    grid: Grid
    a: np.ndarray | float = 1.0
    b: np.ndarray | float = 0.0
    c: np.ndarray | float = 0.0
    d: np.ndarray | float = 0.0
    f: np.ndarray | float = 0.0
    g: np.ndarray | float = 0.0
    lam: float = 1.0
    Lam: np.ndarray | float = 2.0
    f_face: np.ndarray | None = None
    a_x: np.ndarray | float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return 2

    def at(self, name: str, level: int) -> np.ndarray:
        """Field ``name`` at time level ``level`` as an ``(nx, nv)`` array."""
        g = self.grid
        arr = np.asarray(getattr(self, name), dtype=float)
        if arr.ndim == 3:
            arr = arr[level]
        return np.broadcast_to(arr, (g.nx, g.nv))

    def full(self, name: str) -> np.ndarray:
        arr = np.asarray(getattr(self, name), dtype=float)
        return np.broadcast_to(arr, self.grid.shape)

    def face_flux_source(self, level: int) -> np.ndarray:
        if self.f_face is not None:
            ff = np.asarray(self.f_face, dtype=float)
            return ff[level] if ff.ndim == 3 else np.broadcast_to(ff, (self.grid.nx, self.grid.nv - 1))
        f = self.at("f", level)
        return 0.5 * (f[:, 1:] + f[:, :-1])

    @property
    def time_independent(self) -> bool:
        names = ("a", "b", "c", "d", "a_x")
        return all(np.ndim(getattr(self, k)) < 3 for k in names if getattr(self, k) is not None)

    def with_data(self, **changes) -> "RoughCoefficients":
        return replace(self, **changes)

    def solvability(self) -> dict:
        """Worst-case margins of the two M-matrix conditions over all levels."""
        g = self.grid
        worst_a, worst_diag = np.inf, np.inf
        for n in range(1, g.nt + 1) if not self.time_independent else (1,):
            a, b, d = self.at("a", n), self.at("b", n), self.at("d", n)
            af = 0.5 * (a[:, 1:] + a[:, :-1])
            bf = 0.5 * (b[:, 1:] + b[:, :-1])
            worst_a = min(worst_a, float((af - np.abs(bf) * g.dv / 2).min()))
            diag = 1 / g.dt - d[:, 1:-1] - (bf[:, 1:] - bf[:, :-1]) / g.dv
            worst_diag = min(worst_diag, float(diag.min()))
        return {"face_margin": worst_a, "diagonal_margin": worst_diag}


@dataclass
class Stencil:
    """P_h u at level n = cc u + cxm u[i-1] + cxp u[i+1] + cvm u[j-1] + cvp u[j+1] - u_prev / dt + const."""

    cc: np.ndarray
    cxm: np.ndarray
    cxp: np.ndarray
    cvm: np.ndarray
    cvp: np.ndarray
    const: np.ndarray


def stencil(coeffs: RoughCoefficients, level: int) -> Stencil:
    """Stencil weights on the interior block ``[1:-1, 1:-1]`` at time level ``level``."""
    g = coeffs.grid
    dt, dx, dv = g.dt, g.dx, g.dv
    a, b, c = coeffs.at("a", level), coeffs.at("b", level), coeffs.at("c", level)
    d, gg = coeffs.at("d", level), coeffs.at("g", level)
    af = 0.5 * (a[:, 1:] + a[:, :-1])
    bf = 0.5 * (b[:, 1:] + b[:, :-1])
    ff = coeffs.face_flux_source(level)
    I = slice(1, -1)
    ar, al = af[I, 1:], af[I, :-1]
    br, bl = bf[I, 1:], bf[I, :-1]
    cp = np.maximum(c[I, I], 0.0)
    cm = np.maximum(-c[I, I], 0.0)
    vel = np.broadcast_to(g.v[None, I], cp.shape)
    vp, vm = np.maximum(vel, 0.0), np.maximum(-vel, 0.0)

    cvp = -ar / dv**2 - br / (2 * dv) - cp / dv
    cvm = -al / dv**2 + bl / (2 * dv) - cm / dv
    cxm = -vp / dx
    cxp = -vm / dx
    cc = 1 / dt + (ar + al) / dv**2 + (bl - br) / (2 * dv) + (cp + cm) / dv + (vp + vm) / dx - d[I, I]
    if coeffs.a_x is not None:
        ax = coeffs.at("a_x", level)
        axf = 0.5 * (ax[1:, :] + ax[:-1, :])
        axr, axl = axf[1:, I], axf[:-1, I]
        cxp = cxp - axr / dx**2
        cxm = cxm - axl / dx**2
        cc = cc + (axr + axl) / dx**2
    const = (ff[I, 1:] - ff[I, :-1]) / dv + gg[I, I]
    return Stencil(cc, cxm, cxp, cvm, cvp, const)


def residual(coeffs: RoughCoefficients, u: np.ndarray) -> np.ndarray:
    """P_h u on the grid; zero at level 0 and on the lateral boundary."""
    g = coeffs.grid
    u = np.asarray(u, dtype=float)
    out = np.zeros(g.shape)
    I = slice(1, -1)
    for n in range(1, g.nt + 1):
        st = stencil(coeffs, n) if (n == 1 or not coeffs.time_independent) else _with_const(st, coeffs, n)
        un = u[n]
        out[n, I, I] = (
            st.cc * un[I, I]
            + st.cxm * un[:-2, I]
            + st.cxp * un[2:, I]
            + st.cvm * un[I, :-2]
            + st.cvp * un[I, 2:]
            - u[n - 1, I, I] / g.dt
            + st.const
        )
    return out


def _with_const(st: Stencil, coeffs: RoughCoefficients, level: int) -> Stencil:
    # only f and g may vary in time when the principal part is frozen
    g = coeffs.grid
    I = slice(1, -1)
    ff = coeffs.face_flux_source(level)
    const = (ff[I, 1:] - ff[I, :-1]) / g.dv + coeffs.at("g", level)[I, I]
    return Stencil(st.cc, st.cxm, st.cxp, st.cvm, st.cvp, const)


def _matrix(st: Stencil) -> sp.csc_matrix:
    mx, mv = st.cc.shape
    idx = np.arange(mx * mv).reshape(mx, mv)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [st.cc.ravel()]
    for w, sl_row, sl_col in (
        (st.cxm, (slice(1, None), slice(None)), (slice(None, -1), slice(None))),
        (st.cxp, (slice(None, -1), slice(None)), (slice(1, None), slice(None))),
        (st.cvm, (slice(None), slice(1, None)), (slice(None), slice(None, -1))),
        (st.cvp, (slice(None), slice(None, -1)), (slice(None), slice(1, None))),
    ):
        rows.append(idx[sl_row].ravel())
        cols.append(idx[sl_col].ravel())
        vals.append(w[sl_row].ravel())
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(mx * mv,) * 2)
    return A.tocsc()


class SolverError(RuntimeError):
    pass


_LU_CACHE: OrderedDict = OrderedDict()
_LU_CACHE_SIZE = 2


def _fingerprint(coeffs: RoughCoefficients) -> tuple:
    h = hashlib.sha1()
    for name in ("a", "b", "c", "d", "a_x"):
        arr = getattr(coeffs, name)
        h.update(name.encode())
        if arr is not None:
            arr = np.ascontiguousarray(np.asarray(arr, dtype=float))
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
    return (coeffs.grid, h.hexdigest())


def _factor(coeffs: RoughCoefficients, st: Stencil, level: int):
    """LU factor of the implicit matrix; reused across calls for time-independent principal parts."""
    key = _fingerprint(coeffs) if coeffs.time_independent else None
    if key is not None and key in _LU_CACHE:
        _LU_CACHE.move_to_end(key)
        return _LU_CACHE[key]
    try:
        lu = spla.splu(_matrix(st))
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"implicit matrix singular at level {level}: {exc}") from exc
    if key is not None:
        _LU_CACHE[key] = lu
        while len(_LU_CACHE) > _LU_CACHE_SIZE:
            _LU_CACHE.popitem(last=False)
    return lu


def solve(
    coeffs: RoughCoefficients,
    u0: np.ndarray,
    source: np.ndarray | None = None,
    boundary: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """March P_h u = source from ``u0`` with Dirichlet lateral data.

    ``boundary`` is a full-grid array whose lateral values are imposed; by
    default the lateral values of ``u0`` are held fixed in time.
    """
    g = coeffs.grid
    u = np.empty(g.shape)
    u[0] = u0
    if boundary is None:
        u[1:] = u0[None]
    else:
        u[1:] = boundary[1:]
    I = slice(1, -1)
    lu = None
    st = None
    step_res = []
    for n in range(1, g.nt + 1):
        if st is None or not coeffs.time_independent:
            st = stencil(coeffs, n)
            lu = None
        else:
            st = _with_const(st, coeffs, n)
        if lu is None:
            lu = _factor(coeffs, st, n)
        un = u[n]
        rhs = u[n - 1, I, I] / g.dt - st.const
        if source is not None:
            rhs = rhs + source[n, I, I]
        # known lateral values move to the right-hand side
        rhs = rhs.copy()
        rhs[0, :] -= st.cxm[0, :] * un[0, I]
        rhs[-1, :] -= st.cxp[-1, :] * un[-1, I]
        rhs[:, 0] -= st.cvm[:, 0] * un[I, 0]
        rhs[:, -1] -= st.cvp[:, -1] * un[I, -1]
        sol = lu.solve(rhs.ravel())
        if not np.all(np.isfinite(sol)):
            raise SolverError(f"non-finite solution at level {n}")
        un[I, I] = sol.reshape(rhs.shape)
        step_res.append(float(np.abs(sol).max()))
    info = {"max_abs_per_step": step_res}
    return u, info
