"""Uniform tensor grids in (t, pos, vel) and the quadrature used by every estimate.

Node ``(n, i, j)`` of a :class:`Grid` stands for the cell
``(t_n - dt, t_n] x [x_i - dx/2, x_i + dx/2] x [v_j - dv/2, v_j + dv/2]``.
The half-open time interval matches the implicit Euler step that produces
the value at ``t_n``; level 0 (initial data) therefore carries zero weight.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .geometry import Cylinder

_MAGIC = b"HHGF"

# 16-point rank-1 lattice in the unit cube (generator (1, 5, 11) mod 16),
# used for fractional cell membership.
_LATTICE = ((np.arange(16)[:, None] * np.array([1, 5, 11])) % 16 + 0.5) / 16.0


@dataclass(frozen=True)
class Grid:
    """Uniform node-centred grid on [t_lo, t_hi] x [-x_half, x_half] x [-v_half, v_half]."""

    t_lo: float
    t_hi: float
    nt: int
    x_half: float
    nx: int
    v_half: float
    nv: int

    def __post_init__(self):
        if self.nt < 1 or self.nx < 3 or self.nv < 3:
            raise ValueError("grid needs nt >= 1 and at least 3 nodes per phase axis")
        if not self.t_hi > self.t_lo:
            raise ValueError("t_hi must exceed t_lo")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nt + 1, self.nx, self.nv)

    @property
    def dt(self) -> float:
        return (self.t_hi - self.t_lo) / self.nt

    @property
    def dx(self) -> float:
        return 2 * self.x_half / (self.nx - 1)

    @property
    def dv(self) -> float:
        return 2 * self.v_half / (self.nv - 1)

    @property
    def t(self) -> np.ndarray:
        return self.t_lo + self.dt * np.arange(self.nt + 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.x_half, self.x_half, self.nx)

    @property
    def v(self) -> np.ndarray:
        return np.linspace(-self.v_half, self.v_half, self.nv)

    @property
    def cell_volume(self) -> float:
        return self.dt * self.dx * self.dv

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable (t, x, v) coordinate arrays."""
        return self.t[:, None, None], self.x[None, :, None], self.v[None, None, :]

    def refine(self, factor: float = 2.0) -> "Grid":
        """Same box with every axis resolution multiplied by ``factor``."""
        return Grid(
            self.t_lo,
            self.t_hi,
            int(round(self.nt * factor)),
            self.x_half,
            int(round((self.nx - 1) * factor)) + 1,
            self.v_half,
            int(round((self.nv - 1) * factor)) + 1,
        )

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def interior_mask(self) -> np.ndarray:
        """Nodes where the discrete operator is defined (not initial, not lateral boundary)."""
        m = np.zeros(self.shape, dtype=bool)
        m[1:, 1:-1, 1:-1] = True
        return m

    def to_dict(self) -> dict:
        return {
            "t_lo": self.t_lo,
            "t_hi": self.t_hi,
            "nt": self.nt,
            "x_half": self.x_half,
            "nx": self.nx,
            "v_half": self.v_half,
            "nv": self.nv,
        }


@dataclass
class GridField:
    """A scalar field sampled on the nodes of a :class:`Grid`."""

    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    def to_bytes(self) -> bytes:
        g = self.grid
        header = {
            "dims": list(g.shape),
            "spacings": [g.dt, g.dx, g.dv],
            "origin": [g.t_lo, -g.x_half, -g.v_half],
            "time_range": [g.t_lo, g.t_hi],
            "grid": g.to_dict(),
            "meta": self.meta,
        }
        raw = json.dumps(header, sort_keys=True).encode()
        payload = np.ascontiguousarray(self.values, dtype="<f8").tobytes(order="C")
        return _MAGIC + struct.pack("<I", len(raw)) + raw + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GridField":
        if blob[:4] != _MAGIC:
            raise ValueError("not a GridField dump")
        (n,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8 : 8 + n])
        grid = Grid(**header["grid"])
        values = np.frombuffer(blob[8 + n :], dtype="<f8").reshape(header["dims"]).copy()
        return cls(grid, values, header.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GridField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def domain_weights(grid: Grid) -> np.ndarray:
    """Quadrature weights of the whole box (level 0 excluded)."""
    w = np.full(grid.shape, grid.cell_volume)
    w[0] = 0.0
    return w


@lru_cache(maxsize=24)
def _cylinder_weights_cached(grid: Grid, cyl: "Cylinder") -> np.ndarray:
    t, x, v = grid.t, grid.x, grid.v
    dt, dx, dv = grid.dt, grid.dx, grid.dv
    w = np.zeros(grid.shape)
    t0 = cyl.base.t
    # cells touching the time window (t0 - s, t0]
    levels = [n for n in range(1, grid.nt + 1) if t[n] > t0 - cyl.s and t[n] - dt < t0]
    ot, ox, ov = _LATTICE[:, 0], _LATTICE[:, 1] - 0.5, _LATTICE[:, 2] - 0.5
    for n in levels:
        ts = t[n] - dt + ot * dt  # (16,)
        inside_t = (ts > t0 - cyl.s) & (ts <= t0)
        if not inside_t.any():
            continue
        # flow every sample back to the top time t0 and test the ball
        xs = x[:, None, None] + ox[None, None, :] * dx
        vs = v[None, :, None] + ov[None, None, :] * dv
        tau = (t0 - ts)[None, None, :]
        pos, vel = cyl.flow_to_top(tau, xs, vs)
        inside = cyl.in_ball(pos, vel) & inside_t[None, None, :]
        w[n] = inside.mean(axis=-1)
    w *= grid.cell_volume
    w.setflags(write=False)
    return w


def cylinder_weights(grid: Grid, cyl: "Cylinder") -> np.ndarray:
    """Fractional-cell quadrature weights of ``cyl`` (16 lattice samples per cell)."""
    return _cylinder_weights_cached(grid, cyl)


def lp_norm(values: np.ndarray, weights: np.ndarray, p: float) -> float:
    """Weighted Lebesgue norm; ``p = inf`` is the max over cells of positive weight."""
    a = np.abs(values)
    if np.isinf(p):
        sel = weights > 0
        return float(a[sel].max()) if sel.any() else 0.0
    return float(np.sum(weights * a**p) ** (1.0 / p))


def measure(weights: np.ndarray, mask: np.ndarray | None = None) -> float:
    if mask is None:
        return float(weights.sum())
    return float(weights[mask].sum())
