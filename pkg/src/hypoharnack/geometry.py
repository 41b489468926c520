"""Drift flows, drift-aligned parabolic cylinders and transported cutoffs.

Phase coordinates are arrays whose last axis holds ``(pos_1..pos_d, vel_1..vel_d)``.
The ball defining a cylinder is the ordinary Euclidean ball on that whole block.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import Grid


class DriftKind(str, enum.Enum):
    KINETIC = "kinetic"
    ZERO = "zero"


@dataclass(frozen=True)
class PhasePoint:
    t: float
    pos: tuple[float, ...]
    vel: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "pos", tuple(float(p) for p in np.atleast_1d(self.pos)))
        object.__setattr__(self, "vel", tuple(float(p) for p in np.atleast_1d(self.vel)))
        if len(self.pos) != len(self.vel):
            raise ValueError("kinetic phase space needs dim(pos) == dim(vel)")
        if not all(math.isfinite(c) for c in (self.t, *self.pos, *self.vel)):
            raise ValueError("phase point coordinates must be finite")

    @property
    def dim(self) -> int:
        return len(self.pos)

    @property
    def coords(self) -> np.ndarray:
        return np.array(self.pos + self.vel)

    @classmethod
    def origin(cls, t: float = 0.0, dim: int = 1) -> "PhasePoint":
        return cls(t, (0.0,) * dim, (0.0,) * dim)

    def to_dict(self) -> dict:
        return {"t": self.t, "pos": list(self.pos), "vel": list(self.vel)}


def flow(drift: DriftKind, t_from, t_to, p: np.ndarray) -> np.ndarray:
    """Characteristic flow of the spatial drift from ``t_from`` to ``t_to``.

    For the kinetic drift ``v . grad_pos`` this is ``(pos + (t_to - t_from) vel, vel)``.
    """
    p = np.asarray(p, dtype=float)
    if DriftKind(drift) is DriftKind.ZERO:
        return p.copy()
    d = p.shape[-1] // 2
    tau = np.asarray(t_to, dtype=float) - np.asarray(t_from, dtype=float)
    out = p.copy()
    out[..., :d] = p[..., :d] + tau[..., None] * p[..., d:] if np.ndim(tau) else p[..., :d] + tau * p[..., d:]
    return out


@dataclass(frozen=True)
class Cylinder:
    """Q_{s,r}(base): times in (t0 - s, t0] whose characteristic lands in B_r(x0) at t0."""

    base: PhasePoint
    s: float
    r: float
    drift: DriftKind = DriftKind.KINETIC

    def __post_init__(self):
        if self.s < 0 or self.r <= 0:
            raise ValueError("cylinder needs s >= 0 and r > 0")
        object.__setattr__(self, "drift", DriftKind(self.drift))

    def flow_to_top(self, tau, pos, vel):
        """Carry (pos, vel) forward by ``tau = t0 - t`` (one-dimensional blocks)."""
        if self.drift is DriftKind.ZERO:
            return pos, vel
        return pos + tau * vel, vel

    def in_ball(self, pos, vel) -> np.ndarray:
        b = self.base
        return (pos - b.pos[0]) ** 2 + (vel - b.vel[0]) ** 2 < self.r**2

    def contains(self, t, p) -> np.ndarray:
        """Vectorised membership for times ``t`` (...) and phase coordinates ``p`` (..., 2d)."""
        t = np.asarray(t, dtype=float)
        p = np.asarray(p, dtype=float)
        t0 = self.base.t
        top = flow(self.drift, t, np.full_like(t, t0), p)
        dist2 = np.sum((top - self.base.coords) ** 2, axis=-1)
        return (t > t0 - self.s) & (t <= t0) & (dist2 < self.r**2)

    def contains_point(self, q: PhasePoint) -> bool:
        return bool(self.contains(np.array(q.t), q.coords))

    def with_scales(self, s: float, r: float) -> "Cylinder":
        return Cylinder(self.base, s, r, self.drift)

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "s": self.s,
            "r": self.r,
            "drift": self.drift.value,
            "kind": "cylinder",
            "scales": [self.s, self.r],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Cylinder":
        b = d["base"]
        return cls(PhasePoint(b["t"], b["pos"], b["vel"]), d["s"], d["r"], DriftKind(d["drift"]))


def ball_volume(r: float, n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * r**n


def cylinder_measure(c: Cylinder) -> float:
    # both drifts are divergence free, so each time slice keeps the ball volume
    return c.s * ball_volume(c.r, 2 * c.base.dim)


# --- cutoff profiles -------------------------------------------------------


def bridge(s):
    """C^2 monotone bridge from 1 (s <= 0) to 0 (s >= 1): one minus the integrated 30 s^2 (1-s)^2 bump."""
    s = np.clip(s, 0.0, 1.0)
    return np.clip(1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2), 0.0, 1.0)


def bridge_d1(s):
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, -30.0 * s**2 * (1.0 - s) ** 2, 0.0)


def bridge_d2(s):
    inside = (s > 0) & (s < 1)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s), 0.0)


BRIDGE_D1_MAX = 15.0 / 8.0
BRIDGE_D2_MAX = 10.0 / math.sqrt(3.0)


class CutoffKind(str, enum.Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


@dataclass(frozen=True)
class CutoffField:
    """A [0, 1]-valued cutoff.

    Spatial cutoffs are a radial bridge between ``inner`` and ``outer`` in the
    variables transported to the base time, so ``X_0 eta = 0`` holds exactly.
    ``radial="squared"`` bridges in |y|^2 instead of |y|, which trades the
    curvature term of the Hessian for a larger support.
    Temporal cutoffs go from 0 at ``inner`` to 1 at ``outer`` in time.
    """

    kind: CutoffKind
    inner: float
    outer: float
    base: PhasePoint | None = None
    drift: DriftKind = DriftKind.KINETIC
    window: tuple[float, float] | None = None
    radial: str = "linear"

    def _s(self, dist2):
        if self.radial == "squared":
            return (dist2 - self.inner**2) / (self.outer**2 - self.inner**2)
        return (np.sqrt(dist2) - self.inner) / (self.outer - self.inner)

    def __call__(self, t, pos=None, vel=None):
        if self.kind is CutoffKind.TEMPORAL:
            return 1.0 - bridge((np.asarray(t, dtype=float) - self.inner) / (self.outer - self.inner))
        t = np.asarray(t, dtype=float)
        tau = self.base.t - t
        if self.drift is DriftKind.ZERO:
            tau = 0.0 * tau
        pos = np.asarray(pos, dtype=float)
        vel = np.asarray(vel, dtype=float)
        if pos.ndim and pos.shape[-1:] == (self.base.dim,) and self.base.dim > 1:
            top = pos + np.asarray(tau)[..., None] * vel
            dist2 = np.sum((top - self.base.pos) ** 2, -1) + np.sum((vel - self.base.vel) ** 2, -1)
        else:
            top = pos + tau * vel
            dist2 = (top - self.base.pos[0]) ** 2 + (vel - self.base.vel[0]) ** 2
        return bridge(self._s(dist2))

    def time_derivative(self, t):
        if self.kind is not CutoffKind.TEMPORAL:
            raise TypeError("time_derivative is only defined for temporal cutoffs")
        w = self.outer - self.inner
        return -bridge_d1((np.asarray(t, dtype=float) - self.inner) / w) / w

    def on_grid(self, grid: Grid) -> np.ndarray:
        t, x, v = grid.mesh()
        if self.kind is CutoffKind.TEMPORAL:
            return np.broadcast_to(self(t), grid.shape).copy()
        return np.broadcast_to(self(t, x, v), grid.shape).copy()

    def to_dict(self) -> dict:
        return {
            "base": None if self.base is None else self.base.to_dict(),
            "drift": DriftKind(self.drift).value,
            "kind": CutoffKind(self.kind).value,
            "scales": [self.inner, self.outer],
            "window": None if self.window is None else list(self.window),
            "radial": self.radial,
        }


def make_spatial_cutoff(
    grid: Grid | None,
    r1: float,
    r2: float,
    window: tuple[float, float],
    base: PhasePoint,
    drift: DriftKind = DriftKind.KINETIC,
    radial: str = "linear",
) -> tuple[CutoffField, np.ndarray | None]:
    """Cutoff equal to 1 on Q_{S,r1}(base) and 0 outside Q_{S,r2}(base).

    Returns the cutoff and, when ``grid`` is given, its nodal values.
    """
    if not r1 < r2:
        raise ValueError(f"spatial cutoff needs r1 < r2, got r1={r1}, r2={r2}")
    if r1 <= 0 and radial == "linear":
        raise ValueError("linear radial profile needs r1 > 0")
    eta = CutoffField(CutoffKind.SPATIAL, r1, r2, base, DriftKind(drift), tuple(window), radial)
    return eta, (eta.on_grid(grid) if grid is not None else None)


def make_temporal_cutoff(s1: float, s2: float) -> CutoffField:
    """tau(t) = 0 for t <= s1, 1 for t >= s2, with |tau'| <= (15/8)/(s2 - s1)."""
    if not s1 < s2:
        raise ValueError(f"temporal cutoff needs s1 < s2, got s1={s1}, s2={s2}")
    return CutoffField(CutoffKind.TEMPORAL, s1, s2)


# --- the small-cutoff domains Sigma_R ---------------------------------------

_S = np.linspace(0.0, 1.0, 4001)


def squared_profile_hessian_bound(r1: float, r2: float, tau_max: float = 1.0) -> float:
    """Sup of |X X eta| for the squared-radius bridge transported over time ``tau_max``."""
    W = r2**2 - r1**2
    y2 = r1**2 + _S * W
    h = np.abs(bridge_d2(_S)) * 4.0 * y2 / W**2 + 2.0 * np.abs(bridge_d1(_S)) / W
    return float((1.0 + tau_max**2) * h.max())


def squared_profile_gradient_bound(r1: float, r2: float, tau_max: float = 1.0) -> float:
    W = r2**2 - r1**2
    y = np.sqrt(r1**2 + _S * W)
    g = np.abs(bridge_d1(_S)) * 2.0 * y / W
    return float(math.sqrt(1.0 + tau_max**2) * g.max())


def _smallest_radius(bound, r1: float, target: float) -> float:
    lo, hi = r1 * (1 + 1e-9), r1 + 1.0
    while bound(r1, hi) > target:
        hi = r1 + 2 * (hi - r1)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if bound(r1, mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


SIGMA_INNER = 2.0
SIGMA_MARGIN = 0.9


def sigma_radius(R: float) -> float:
    """Radius of Sigma~_R: smallest one whose transported cutoff has |X X eta~| <= 0.9/R."""
    return _smallest_radius(squared_profile_hessian_bound, SIGMA_INNER, SIGMA_MARGIN / R)


def sigma_outer_radius(R: float) -> float:
    rt = sigma_radius(R)
    return _smallest_radius(squared_profile_gradient_bound, rt, SIGMA_MARGIN)


class SigmaDomains(NamedTuple):
    sigma_tilde: Cylinder
    sigma: Cylinder
    eta_tilde: CutoffField
    eta: CutoffField


def sigma_domains(R: float, base: PhasePoint | None = None) -> SigmaDomains:
    """Nested cylinders C_{1,2} < Sigma~_R < Sigma_R with transported cutoffs.

    eta~ is 1 on C_{1,2} (hence on C_{1,1}) with |X eta~| <= 1 and |X X eta~| <= 1/R;
    eta is 1 on Sigma~_R with |X eta| <= 1.
    """
    if not R > 1:
        raise ValueError(f"sigma_domains needs R > 1, got {R}")
    base = base or PhasePoint.origin()
    rt = sigma_radius(R)
    ro = sigma_outer_radius(R)
    window = (base.t - 1.0, base.t)
    eta_t = CutoffField(CutoffKind.SPATIAL, SIGMA_INNER, rt, base, DriftKind.KINETIC, window, "squared")
    eta = CutoffField(CutoffKind.SPATIAL, rt, ro, base, DriftKind.KINETIC, window, "squared")
    return SigmaDomains(Cylinder(base, 1.0, rt), Cylinder(base, 1.0, ro), eta_t, eta)


def measure_cutoff_bounds(
    eta: CutoffField, samples: int = 20000, h: float = 1e-3, seed: int = 0, extent: float | None = None
) -> dict:
    """Finite-difference scan of |X eta|, |X X eta| and |X_0 eta| at random points (d = 1).

    Points are drawn in the time window and a box covering the outer support.
    """
    rng = np.random.default_rng(seed)
    b = eta.base
    t_lo, t_hi = eta.window
    ext = extent if extent is not None else eta.outer
    t = rng.uniform(t_lo, t_hi, samples)
    vel = b.vel[0] + rng.uniform(-ext, ext, samples)
    # sample around the transported support so the bridge region is hit
    pos = b.pos[0] - (b.t - t) * vel + rng.uniform(-ext, ext, samples)
    e0 = eta(t, pos, vel)
    ep = eta(t, pos, vel + h)
    em = eta(t, pos, vel - h)
    grad = (ep - em) / (2 * h)
    hess = (ep - 2 * e0 + em) / h**2
    # X_0 = d/dt + vel d/dpos
    x0 = (eta(t + h, pos + h * vel, vel) - eta(t - h, pos - h * vel, vel)) / (2 * h)
    return {
        "max_grad": float(np.abs(grad).max()),
        "max_hess": float(np.abs(hess).max()),
        "max_transport": float(np.abs(x0).max()),
        "min_value": float(e0.min()),
        "max_value": float(e0.max()),
    }
